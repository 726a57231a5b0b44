//! Channel statistics from multipath sets, distribution fits and the
//! comparison against reference UMi values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::clustering::ClusterResult;
use crate::error::{Error, Result};
use crate::propagation::{fspl, LinkCase};
use crate::synth::{Mpc, MpcSet};

pub const ASA_CAP: f64 = 104.0;
pub const ESA_CAP: f64 = 52.0;

/// Power-weighted rms delay spread. Delays are centred before squaring.
pub fn weighted_delay_spread(powers: &[f64], delays: &[f64]) -> f64 {
    let total: f64 = powers.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let t0 = delays.first().copied().unwrap_or(0.0);
    let mean = powers.iter().zip(delays).map(|(p, t)| p * (t - t0)).sum::<f64>() / total;
    let var = powers
        .iter()
        .zip(delays)
        .map(|(p, t)| p * (t - t0 - mean).powi(2))
        .sum::<f64>()
        / total;
    var.max(0.0).sqrt()
}

/// Circular spread `sqrt(−2 ln |Σ p e^{jθ} / Σ p|)` in degrees, uncapped.
pub fn weighted_circular_spread(powers: &[f64], angles_deg: &[f64]) -> f64 {
    let total: f64 = powers.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let (mut re, mut im) = (0.0, 0.0);
    for (p, a) in powers.iter().zip(angles_deg) {
        let r = a.to_radians();
        re += p * r.cos();
        im += p * r.sin();
    }
    let resultant = (re.hypot(im) / total).min(1.0);
    if resultant <= 0.0 {
        return f64::INFINITY;
    }
    (-2.0 * resultant.ln()).max(0.0).sqrt().to_degrees()
}

fn circular_mean(powers: &[f64], angles_deg: &[f64]) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (p, a) in powers.iter().zip(angles_deg) {
        let r = a.to_radians();
        re += p * r.cos();
        im += p * r.sin();
    }
    im.atan2(re).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Azimuth,
    Elevation,
}

pub fn rms_delay_spread(mpcs: &[Mpc]) -> Result<f64> {
    if mpcs.is_empty() {
        return Err(Error::Empty("multipath set"));
    }
    let p: Vec<f64> = mpcs.iter().map(Mpc::power).collect();
    let t: Vec<f64> = mpcs.iter().map(|m| m.delay).collect();
    Ok(weighted_delay_spread(&p, &t))
}

/// Circular angular spread, capped at 104° (azimuth) or 52° (elevation).
pub fn circular_angle_spread(mpcs: &[Mpc], plane: Plane) -> Result<f64> {
    if mpcs.is_empty() {
        return Err(Error::Empty("multipath set"));
    }
    let p: Vec<f64> = mpcs.iter().map(Mpc::power).collect();
    let (a, cap): (Vec<f64>, f64) = match plane {
        Plane::Azimuth => (mpcs.iter().map(|m| m.azimuth).collect(), ASA_CAP),
        Plane::Elevation => (mpcs.iter().map(|m| m.elevation).collect(), ESA_CAP),
    };
    Ok(weighted_circular_spread(&p, &a).min(cap))
}

fn strongest_index(set: &MpcSet) -> Option<usize> {
    set.mpcs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.gain_db.total_cmp(&b.1.gain_db))
        .map(|(i, _)| i)
}

/// Cluster powers used for the K-factor, the group holding the strongest
/// component first. Noise points belong to no cluster and are left out,
/// except the strongest component, which counts as a cluster of its own.
pub fn power_groups(set: &MpcSet, clusters: &ClusterResult) -> Vec<f64> {
    let mut groups: Vec<(Vec<usize>, f64)> = clusters
        .clusters
        .iter()
        .map(|c| (c.members.clone(), c.members.iter().map(|&i| set.mpcs[i].power()).sum()))
        .collect();
    if let Some(s) = strongest_index(set) {
        match groups.iter().position(|g| g.0.contains(&s)) {
            Some(pos) => groups.swap(0, pos),
            None => groups.insert(0, (vec![s], set.mpcs[s].power())),
        }
    }
    groups.into_iter().map(|g| g.1).collect()
}

/// K-factor in dB: the group holding the strongest component against the
/// total power of everything else; +∞ when there is nothing else.
pub fn k_factor(groups: &[f64]) -> Result<f64> {
    let (first, rest) = groups.split_first().ok_or(Error::Empty("cluster list"))?;
    let others: f64 = rest.iter().sum();
    if others <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (first / others).log10())
}

/// Number of clusters: DBSCAN clusters, plus one when the strongest
/// component was left as noise, and at least one.
pub fn cluster_count(set: &MpcSet, clusters: &ClusterResult) -> usize {
    let extra = strongest_index(set).is_some_and(|s| clusters.noise.contains(&s)) as usize;
    (clusters.clusters.len() + extra).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpreads {
    /// seconds
    pub cds: f64,
    /// degrees
    pub casa: f64,
    /// degrees
    pub cesa: f64,
}

pub fn cluster_spreads(members: &[Mpc]) -> Result<ClusterSpreads> {
    Ok(ClusterSpreads {
        cds: rms_delay_spread(members)?,
        casa: circular_angle_spread(members, Plane::Azimuth)?,
        cesa: circular_angle_spread(members, Plane::Elevation)?,
    })
}

/// Whether link spreads are computed over individual components or over
/// power-weighted cluster centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadLevel {
    #[default]
    Mpc,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub case: Option<LinkCase>,
    /// m
    pub distance: Option<f64>,
    /// dB
    pub path_loss: f64,
    /// dB, +∞ for a single cluster
    pub k_factor: f64,
    /// seconds
    pub ds: f64,
    /// degrees
    pub asa: f64,
    /// degrees
    pub esa: f64,
    pub n_clusters: usize,
    pub clusters: Vec<ClusterSpreads>,
}

fn centroids(set: &MpcSet, clusters: &ClusterResult) -> Vec<Mpc> {
    let mut groups: Vec<Vec<usize>> = clusters.clusters.iter().map(|c| c.members.clone()).collect();
    groups.extend(clusters.noise.iter().map(|&i| vec![i]));
    groups
        .iter()
        .map(|g| {
            let m: Vec<&Mpc> = g.iter().map(|&i| &set.mpcs[i]).collect();
            let p: Vec<f64> = m.iter().map(|x| x.power()).collect();
            let total: f64 = p.iter().sum();
            let az: Vec<f64> = m.iter().map(|x| x.azimuth).collect();
            let el: Vec<f64> = m.iter().map(|x| x.elevation).collect();
            Mpc {
                delay: m.iter().zip(&p).map(|(x, w)| x.delay * w).sum::<f64>() / total,
                gain_db: 10.0 * total.log10(),
                azimuth: circular_mean(&p, &az).rem_euclid(360.0),
                elevation: circular_mean(&p, &el),
                cluster_id: m[0].cluster_id,
                origin: m[0].origin.clone(),
            }
        })
        .collect()
}

pub fn channel_stats(set: &MpcSet, clusters: &ClusterResult, level: SpreadLevel) -> Result<ChannelStats> {
    if set.is_empty() {
        return Err(Error::Empty("multipath set"));
    }
    if clusters.n_points != set.len() {
        return Err(Error::Domain(format!(
            "cluster labels cover {} points, set has {}",
            clusters.n_points,
            set.len()
        )));
    }
    let spread_set = match level {
        SpreadLevel::Mpc => set.mpcs.clone(),
        SpreadLevel::Cluster => centroids(set, clusters),
    };
    let per_cluster = clusters
        .clusters
        .iter()
        .map(|c| {
            let m: Vec<Mpc> = c.members.iter().map(|&i| set.mpcs[i].clone()).collect();
            cluster_spreads(&m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelStats {
        case: set.link.map(|l| l.state.case),
        distance: set.link.map(|l| l.distance),
        path_loss: -10.0 * set.total_power().log10(),
        k_factor: k_factor(&power_groups(set, clusters))?,
        ds: rms_delay_spread(&spread_set)?,
        asa: circular_angle_spread(&spread_set, Plane::Azimuth)?,
        esa: circular_angle_spread(&spread_set, Plane::Elevation)?,
        n_clusters: cluster_count(set, clusters),
        clusters: per_cluster,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    CloseIn,
    Gaussian,
    LogNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: FitModel,
    pub n: usize,
    pub params: Vec<FitParam>,
    /// RMSE (dB) for close-in fits, KS statistic for distributions.
    pub goodness: f64,
}

impl FitReport {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }
}

fn fp(name: &str, value: f64, std_error: f64) -> FitParam {
    FitParam {
        name: name.into(),
        value,
        std_error,
    }
}

/// Least-squares close-in fit through `fspl(freq, 1 m)`.
/// Parameters: `ple`, `sf_sigma` (population std of residuals).
pub fn fit_ci(points: &[(f64, f64)], freq: f64) -> Result<FitReport> {
    if points.iter().any(|&(d, _)| !(d >= 1.0)) {
        return Err(Error::Domain("close-in fit needs distances ≥ 1 m".into()));
    }
    let d0 = points.first().ok_or(Error::Empty("path loss points"))?.0;
    if points.iter().all(|&(d, _)| d == d0) {
        return Err(Error::Domain("close-in fit needs at least two distinct distances".into()));
    }
    let pl0 = fspl(freq, 1.0)?;
    let x: Vec<f64> = points.iter().map(|&(d, _)| 10.0 * d.log10()).collect();
    let y: Vec<f64> = points.iter().map(|&(_, pl)| pl - pl0).collect();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let ple = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sxx;
    let r: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - ple * a).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sf = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmse = (r.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let s2 = r.iter().map(|v| v * v).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FitReport {
        model: FitModel::CloseIn,
        n: points.len(),
        params: vec![fp("ple", ple, (s2 / sxx).sqrt()), fp("sf_sigma", sf, sf / (2.0 * n).sqrt())],
        goodness: rmse,
    })
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ks_normal(samples: &[f64], mean: f64, std: f64) -> f64 {
    if !(std > 0.0) {
        return 0.0;
    }
    let dist = Normal::new(mean, std).expect("positive std");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).abs().max((((i + 1) as f64) / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Maximum-likelihood Gaussian. Parameters: `mean`, `std`.
pub fn fit_gaussian(samples: &[f64]) -> Result<FitReport> {
    if samples.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 samples (got {})", samples.len())));
    }
    let (mean, std) = mean_std(samples);
    let n = samples.len() as f64;
    Ok(FitReport {
        model: FitModel::Gaussian,
        n: samples.len(),
        params: vec![fp("mean", mean, std / n.sqrt()), fp("std", std, std / (2.0 * n).sqrt())],
        goodness: ks_normal(samples, mean, std),
    })
}

/// Maximum-likelihood log-normal in the log10 domain. Parameters: `mu` and
/// `sigma` (log10), `median` (10^mu) and `mean` (arithmetic mean implied by
/// the fit).
pub fn fit_lognormal(samples: &[f64]) -> Result<FitReport> {
    if samples.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 samples (got {})", samples.len())));
    }
    if samples.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("log-normal fit needs positive samples".into()));
    }
    let logs: Vec<f64> = samples.iter().map(|v| v.log10()).collect();
    let (mu, sigma) = mean_std(&logs);
    let n = samples.len() as f64;
    let median = 10f64.powf(mu);
    let ln10 = std::f64::consts::LN_10;
    let mean = median * ((sigma * ln10).powi(2) / 2.0).exp();
    Ok(FitReport {
        model: FitModel::LogNormal,
        n: samples.len(),
        params: vec![
            fp("mu", mu, sigma / n.sqrt()),
            fp("sigma", sigma, sigma / (2.0 * n).sqrt()),
            fp("median", median, median * ln10 * sigma / n.sqrt()),
            fp("mean", mean, mean * ln10 * sigma / n.sqrt()),
        ],
        goodness: ks_normal(&logs, mu, sigma),
    })
}

/// Step CDF with probabilities k/N; repeated values keep their last step.
pub fn empirical_cdf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(s.len());
    for (i, x) in s.into_iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = p,
            _ => out.push((x, p)),
        }
    }
    Ok(out)
}

pub fn write_cdf_csv<W: Write>(mut w: W, cdf: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "value,probability")?;
    for (x, p) in cdf {
        writeln!(w, "{x},{p}")?;
    }
    Ok(())
}

/// Fitted statistics of one link class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: LinkCase,
    pub n_links: usize,
    pub path_loss: FitReport,
    /// Gaussian over finite K values; absent with fewer than 3.
    pub k_factor: Option<FitReport>,
    pub ds: Option<FitReport>,
    pub asa: Option<FitReport>,
    pub esa: Option<FitReport>,
    pub n_clusters_mean: f64,
    /// seconds
    pub cds_mean: Option<f64>,
    pub casa_mean: Option<f64>,
    pub cesa_mean: Option<f64>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl CaseSummary {
    pub fn from_stats(case: LinkCase, stats: &[ChannelStats], freq: f64) -> Result<Self> {
        let pts: Vec<(f64, f64)> = stats
            .iter()
            .map(|s| {
                s.distance
                    .map(|d| (d, s.path_loss))
                    .ok_or_else(|| Error::Domain("link without distance".into()))
            })
            .collect::<Result<_>>()?;
        let k: Vec<f64> = stats.iter().map(|s| s.k_factor).filter(|k| k.is_finite()).collect();
        let positive = |f: fn(&ChannelStats) -> f64| -> Option<FitReport> {
            let v: Vec<f64> = stats.iter().map(f).filter(|x| *x > 0.0).collect();
            fit_lognormal(&v).ok()
        };
        let spreads = || stats.iter().flat_map(|s| s.clusters.iter());
        Ok(CaseSummary {
            case,
            n_links: stats.len(),
            path_loss: fit_ci(&pts, freq)?,
            k_factor: fit_gaussian(&k).ok(),
            ds: positive(|s| s.ds),
            asa: positive(|s| s.asa),
            esa: positive(|s| s.esa),
            n_clusters_mean: mean_of(stats.iter().map(|s| s.n_clusters as f64)).unwrap_or(0.0),
            cds_mean: mean_of(spreads().map(|c| c.cds)),
            casa_mean: mean_of(spreads().map(|c| c.casa)),
            cesa_mean: mean_of(spreads().map(|c| c.cesa)),
        })
    }

    /// Headline values keyed like the reference table.
    pub fn headline(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("ple", self.path_loss.param("ple"));
        put("sf_sigma", self.path_loss.param("sf_sigma"));
        put("k_mean", self.k_factor.as_ref().and_then(|f| f.param("mean")));
        put("ds_ns", self.ds.as_ref().and_then(|f| f.param("median")).map(|v| v * 1e9));
        put("asa_deg", self.asa.as_ref().and_then(|f| f.param("median")));
        put("esa_deg", self.esa.as_ref().and_then(|f| f.param("median")));
        put("n_clusters", Some(self.n_clusters_mean));
        m
    }
}

/// Per-case reference values, keyed by quantity name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    #[serde(default)]
    pub los: BTreeMap<String, f64>,
    #[serde(default)]
    pub olos: BTreeMap<String, f64>,
}

pub const BUILTIN_REFERENCE: &str = include_str!("../data/3gpp_umi_reference.toml");

impl ReferenceTable {
    pub fn builtin() -> Self {
        toml::from_str(BUILTIN_REFERENCE).expect("bundled reference table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn case(&self, case: LinkCase) -> &BTreeMap<String, f64> {
        match case {
            LinkCase::Los => &self.los,
            LinkCase::Olos => &self.olos,
        }
    }
}

pub const COMPARED_QUANTITIES: [&str; 7] =
    ["ple", "sf_sigma", "k_mean", "ds_ns", "asa_deg", "esa_deg", "n_clusters"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub case: LinkCase,
    pub quantity: String,
    pub measured: Option<f64>,
    pub reference: Option<f64>,
    pub difference: Option<f64>,
    pub ratio: Option<f64>,
    pub note: String,
}

/// K-factor differences above this many dB are annotated.
pub const K_FLAG_DB: f64 = 3.0;
/// Cluster-count ratios at or below this are annotated.
pub const CLUSTER_FLAG_RATIO: f64 = 0.5;

pub fn compare_3gpp(measured: &[CaseSummary], reference: &ReferenceTable) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for s in measured {
        let m = s.headline();
        let r = reference.case(s.case);
        for q in COMPARED_QUANTITIES {
            let mv = m.get(q).copied();
            let rv = r.get(q).copied();
            let difference = mv.zip(rv).map(|(a, b)| a - b);
            let ratio = mv.zip(rv).and_then(|(a, b)| (b != 0.0).then(|| a / b));
            let note = match (q, difference, ratio) {
                (_, None, _) => "unavailable".to_string(),
                ("k_mean", Some(d), _) if d > K_FLAG_DB => format!("K-factor {d:+.2} dB vs reference"),
                ("n_clusters", _, Some(x)) if x <= CLUSTER_FLAG_RATIO => {
                    format!("cluster count {x:.2} of reference")
                }
                _ => String::new(),
            };
            rows.push(ComparisonRow {
                case: s.case,
                quantity: q.to_string(),
                measured: mv,
                reference: rv,
                difference,
                ratio,
                note,
            });
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn write_comparison_csv<W: Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Domain(e.to_string());
    c.write_record(["case", "quantity", "measured", "reference", "difference", "ratio", "note"])
        .map_err(err)?;
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        c.write_record([
            r.case.as_str().to_string(),
            r.quantity.clone(),
            f(r.measured),
            f(r.reference),
            f(r.difference),
            f(r.ratio),
            r.note.clone(),
        ])
        .map_err(err)?;
    }
    c.flush().map_err(|e| Error::Domain(e.to_string()))
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<5} {:<11} {:>12} {:>12} {:>12} {:>8}  note",
        "case", "quantity", "measured", "reference", "difference", "ratio"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<5} {:<11} {:>12} {:>12} {:>12} {:>8}  {}",
            r.case.as_str(),
            r.quantity,
            opt(r.measured),
            opt(r.reference),
            opt(r.difference),
            r.ratio.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
            r.note
        );
    }
    s
}
