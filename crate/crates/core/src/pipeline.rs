//! Stage composition: per-link seeding, round-trip validation, route PDPs
//! and foliage statistics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characterization::{channel_stats, fit_gaussian, CaseSummary, ChannelStats, FitReport, SpreadLevel};
use crate::clustering::{dbscan, ClusterResult};
use crate::error::{Error, Result};
use crate::estimation::{extract_mpcs, omni_pdp, EstimatorOptions};
use crate::params::ParamBundle;
use crate::propagation::{draw_foliage_loss, LinkCase, LinkState, Scene, SPEED_OF_LIGHT};
use crate::sounder::{dealias_extend, simulate_with_pulse, DssScan, Pulse};
use crate::synth::{synthesize_classified, synthesize_link, MpcSet};

/// Random stream of one stage of one link. Streams never depend on the
/// order or the thread links are processed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate = 1,
    Scan = 2,
    Roundtrip = 3,
    Foliage = 4,
}

pub fn stage_rng(seed: u64, stage: Stage, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 40) | index);
    rng
}

/// Delays are unwrapped starting this far ahead of the direct path.
pub const UNWRAP_GUARD: f64 = 30e-9;

/// Estimator options for a link of known distance.
pub fn estimator_options(link_distance: Option<f64>) -> EstimatorOptions {
    EstimatorOptions {
        min_delay: link_distance.map(|d| (d / SPEED_OF_LIGHT - UNWRAP_GUARD).max(0.0)),
        ..EstimatorOptions::new()
    }
}

/// One multipath set per Rx position of the configured scene.
pub fn generate_route(params: &ParamBundle, seed: u64) -> Result<Vec<MpcSet>> {
    (0..params.scene.rx_positions.len())
        .into_par_iter()
        .map(|i| synthesize_link(&params.scene, i, params, &mut stage_rng(seed, Stage::Generate, i as u64)))
        .collect()
}

/// Direction scan of a set; the noise stream is keyed by its Rx index.
pub fn scan_set(set: &MpcSet, params: &ParamBundle, pulse: &Pulse, seed: u64) -> Result<DssScan> {
    let index = set.link.map_or(0, |l| l.rx_index as u64);
    simulate_with_pulse(set, params, pulse, &mut stage_rng(seed, Stage::Scan, index))
}

pub fn estimate_scan(scan: &DssScan, params: &ParamBundle, pulse: &Pulse) -> Result<MpcSet> {
    let opts = estimator_options(scan.link.map(|l| l.distance));
    extract_mpcs(scan, params, pulse, &opts)
}

/// DBSCAN labels written into the set, plus the clustering itself.
pub fn cluster_set(set: &mut MpcSet, params: &ParamBundle) -> Result<ClusterResult> {
    let result = dbscan(&set.mpcs, &params.clustering)?;
    result.apply(set);
    Ok(result)
}

/// A synthetic link pushed through the whole chain.
#[derive(Debug, Clone)]
pub struct LinkRun {
    pub truth: MpcSet,
    pub estimated: MpcSet,
    pub truth_stats: ChannelStats,
    /// `None` when nothing was extracted.
    pub stats: Option<ChannelStats>,
}

/// Synthesize, scan, estimate, cluster and characterize one link on a
/// straight, scatterer-free street.
pub fn run_link(
    params: &ParamBundle,
    case: LinkCase,
    distance: f64,
    pulse: &Pulse,
    rng: &mut ChaCha8Rng,
) -> Result<LinkRun> {
    let scene = Scene::route(&[distance]);
    let foliage_loss = match case {
        LinkCase::Los => 0.0,
        LinkCase::Olos => draw_foliage_loss(&params.foliage, rng),
    };
    let state = LinkState { case, foliage_loss };
    let truth = synthesize_classified(&scene, 0, state, params, rng)?;
    let truth_stats = channel_stats(&truth, &ClusterResult::from_set(&truth, params.clustering), SpreadLevel::Mpc)?;
    let scan = simulate_with_pulse(&truth, params, pulse, rng)?;
    let mut estimated = match params.roundtrip.estimator_dynamic_range {
        Some(r) => {
            let mut p = params.clone();
            p.sounder.dynamic_range_r = r;
            estimate_scan(&scan, &p, pulse)?
        }
        None => estimate_scan(&scan, params, pulse)?,
    };
    let stats = if estimated.is_empty() {
        None
    } else {
        let clusters = cluster_set(&mut estimated, params)?;
        Some(channel_stats(&estimated, &clusters, SpreadLevel::Mpc)?)
    };
    Ok(LinkRun {
        truth,
        estimated,
        truth_stats,
        stats,
    })
}

/// One recovered quantity against its configured value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub case: LinkCase,
    pub quantity: String,
    pub target: f64,
    pub recovered: f64,
    pub low: f64,
    pub high: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
enum Tol {
    Abs(f64),
    Rel(f64),
}

fn tolerances(case: LinkCase) -> &'static [(&'static str, Tol)] {
    match case {
        LinkCase::Los => &[
            ("ple", Tol::Abs(0.10)),
            ("sf_sigma", Tol::Abs(0.4)),
            ("k_mean", Tol::Abs(1.5)),
            ("ds_ns", Tol::Rel(0.20)),
            ("asa_deg", Tol::Rel(0.20)),
            ("esa_deg", Tol::Rel(0.25)),
            ("n_clusters", Tol::Abs(0.5)),
        ],
        LinkCase::Olos => &[
            ("ple", Tol::Abs(0.15)),
            ("sf_sigma", Tol::Abs(1.0)),
            ("k_mean", Tol::Abs(1.5)),
            ("ds_ns", Tol::Rel(0.20)),
            ("n_clusters", Tol::Abs(0.6)),
        ],
    }
}

fn configured(params: &ParamBundle, case: LinkCase, quantity: &str) -> f64 {
    let p = params.case(case);
    match quantity {
        "ple" => p.ple,
        "sf_sigma" => p.sf_sigma,
        "k_mean" => p.k_mean,
        "ds_ns" => p.ds_mean * 1e9,
        "asa_deg" => p.asa_mean,
        "esa_deg" => p.esa_mean,
        "n_clusters" => p.n_clusters_mean,
        _ => f64::NAN,
    }
}

/// Compares a recovered summary with the configured parameters.
pub fn check_summary(params: &ParamBundle, summary: &CaseSummary) -> Vec<CheckRow> {
    let got = summary.headline();
    tolerances(summary.case)
        .iter()
        .map(|&(q, tol)| {
            let target = configured(params, summary.case, q);
            let (low, high) = match tol {
                Tol::Abs(t) => (target - t, target + t),
                Tol::Rel(r) => (target * (1.0 - r), target * (1.0 + r)),
            };
            let recovered = got.get(q).copied().unwrap_or(f64::NAN);
            CheckRow {
                case: summary.case,
                quantity: q.to_string(),
                target,
                recovered,
                low,
                high,
                pass: recovered >= low && recovered <= high,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkRecord {
    pub case: LinkCase,
    pub distance: f64,
    pub n_true: usize,
    pub n_estimated: usize,
    pub truth: ChannelStats,
    pub estimated: Option<ChannelStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub seed: u64,
    pub links_per_case: usize,
    pub rows: Vec<CheckRow>,
    pub recovered: Vec<CaseSummary>,
    /// Summaries of the synthesized ground truth, for diagnosis.
    pub truth: Vec<CaseSummary>,
    pub links: Vec<LinkRecord>,
}

impl RoundtripReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&CheckRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{:<4} {:<10} target {:>9.3}  recovered {:>9.3}  [{:.3}, {:.3}]  {}\n",
                r.case.as_str(),
                r.quantity,
                r.target,
                r.recovered,
                r.low,
                r.high,
                if r.pass { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

pub fn write_checks_csv<W: Write>(w: W, rows: &[CheckRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Domain(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Domain(e.to_string()))
}

/// Runs `n` synthetic links per case (log-uniform distances) through the
/// chain and checks the recovered statistics.
pub fn roundtrip(params: &ParamBundle, n: usize, seed: u64, pulse: &Pulse) -> Result<RoundtripReport> {
    if n < 3 {
        return Err(Error::Domain(format!("need at least 3 links per case (got {n})")));
    }
    let (lo, hi) = (params.roundtrip.min_distance, params.roundtrip.max_distance);
    let mut rows = Vec::new();
    let mut recovered = Vec::new();
    let mut truth = Vec::new();
    let mut links = Vec::new();
    for (c, case) in [LinkCase::Los, LinkCase::Olos].into_iter().enumerate() {
        let runs: Vec<(f64, LinkRun)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stage_rng(seed, Stage::Roundtrip, (c * n + i) as u64);
                let u: f64 = rand::Rng::random(&mut rng);
                let d = lo * (hi / lo).powf(u);
                run_link(params, case, d, pulse, &mut rng).map(|r| (d, r))
            })
            .collect::<Result<_>>()?;
        let est: Vec<ChannelStats> = runs.iter().filter_map(|(_, r)| r.stats.clone()).collect();
        let tru: Vec<ChannelStats> = runs.iter().map(|(_, r)| r.truth_stats.clone()).collect();
        truth.push(CaseSummary::from_stats(case, &tru, params.plan.center_freq)?);
        if est.len() < 3 {
            return Err(Error::Empty("recovered links"));
        }
        let summary = CaseSummary::from_stats(case, &est, params.plan.center_freq)?;
        rows.extend(check_summary(params, &summary));
        if est.len() < n {
            rows.push(CheckRow {
                case,
                quantity: "links_recovered".into(),
                target: n as f64,
                recovered: est.len() as f64,
                low: n as f64,
                high: n as f64,
                pass: false,
            });
        }
        recovered.push(summary);
        links.extend(runs.into_iter().map(|(d, r)| LinkRecord {
            case,
            distance: d,
            n_true: r.truth.len(),
            n_estimated: r.estimated.len(),
            truth: r.truth_stats,
            estimated: r.stats,
        }));
    }
    Ok(RoundtripReport {
        seed,
        links_per_case: n,
        rows,
        recovered,
        truth,
        links,
    })
}

/// Omnidirectional PDPs along the route, one row per Rx position.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePdp {
    /// m
    pub distances: Vec<f64>,
    /// seconds
    pub delays: Vec<f64>,
    /// dB, `rows[i][k]` at `distances[i]`, `delays[k]`
    pub rows: Vec<Vec<f64>>,
    pub sets: Vec<MpcSet>,
}

impl RoutePdp {
    /// Bin holding the row maximum.
    pub fn row_peak(&self, row: usize) -> usize {
        self.rows[row]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(k, _)| k)
    }
}

/// Generate, scan and de-alias every route position, then sum the
/// directional PDPs.
pub fn route_pdp(params: &ParamBundle, seed: u64, pulse: &Pulse) -> Result<RoutePdp> {
    let sets = generate_route(params, seed)?;
    let rows = sets
        .par_iter()
        .map(|set| {
            let scan = dealias_extend(&scan_set(set, params, pulse, seed)?)?;
            Ok(omni_pdp(&scan, &params.sounder))
        })
        .collect::<Result<Vec<_>>>()?;
    let delays = rows.first().map(|p| p.delays.clone()).unwrap_or_default();
    Ok(RoutePdp {
        distances: sets.iter().map(|s| s.link.map_or(f64::NAN, |l| l.distance)).collect(),
        delays,
        rows: rows.into_iter().map(|p| p.power).collect(),
        sets,
    })
}

/// `distance_m` followed by one column per delay bin (ns).
pub fn write_route_pdp_csv<W: Write>(mut w: W, pdp: &RoutePdp) -> std::io::Result<()> {
    write!(w, "distance_m")?;
    for t in &pdp.delays {
        write!(w, ",{:.4}", t * 1e9)?;
    }
    writeln!(w)?;
    for (d, row) in pdp.distances.iter().zip(&pdp.rows) {
        write!(w, "{d}")?;
        for v in row {
            write!(w, ",{v:.3}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Foliage loss draws with their Gaussian fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoliageStats {
    pub draws: Vec<f64>,
    pub fit: FitReport,
}

pub fn foliage_stats(params: &ParamBundle, n: usize, seed: u64) -> Result<FoliageStats> {
    let mut rng = stage_rng(seed, Stage::Foliage, 0);
    let draws: Vec<f64> = (0..n).map(|_| draw_foliage_loss(&params.foliage, &mut rng)).collect();
    let fit = fit_gaussian(&draws)?;
    Ok(FoliageStats { draws, fit })
}

/// Foliage excess loss read off the strongest estimated component: its
/// path loss minus the free-space loss over its delay.
pub fn foliage_from_direct(set: &MpcSet, freq: f64) -> Result<f64> {
    let m = set
        .mpcs
        .iter()
        .max_by(|a, b| a.gain_db.total_cmp(&b.gain_db))
        .ok_or(Error::Empty("multipath set"))?;
    crate::propagation::foliage_excess_loss(-m.gain_db, m.delay, freq)
}

