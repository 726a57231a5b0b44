//! Per-link multipath synthesis.
//!
//! A link is built in three layers: a cluster skeleton (3GPP-style
//! exponential delays and powers, Gaussian angle offsets around the direct
//! direction), rays inside each cluster, and deterministic echoes from the
//! scene's point scatterers. Link-level spreads (DS, ASA, ESA) are hit by
//! scaling cluster offsets after ray placement; intra-cluster spreads are
//! hit exactly per cluster.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};

use crate::characterization::{weighted_circular_spread, weighted_delay_spread, ASA_CAP, ESA_CAP};
use crate::error::{Error, Result};
use crate::params::{ParamBundle, SynthParams, UmiCaseParams};
use crate::propagation::{
    ci_path_loss, classify_link, direction_deg, fspl, norm, sub, LinkCase, LinkState, Scene,
    SPEED_OF_LIGHT,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MpcOrigin {
    Los,
    OlosDirect,
    Stochastic,
    Scatterer(String),
    Estimated,
}

impl MpcOrigin {
    pub fn is_direct(&self) -> bool {
        matches!(self, MpcOrigin::Los | MpcOrigin::OlosDirect)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "los" => MpcOrigin::Los,
            "olos-direct" => MpcOrigin::OlosDirect,
            "stochastic" => MpcOrigin::Stochastic,
            "estimated" => MpcOrigin::Estimated,
            _ => MpcOrigin::Scatterer(s.strip_prefix("scatterer:")?.to_string()),
        })
    }
}

impl fmt::Display for MpcOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MpcOrigin::Los => f.write_str("los"),
            MpcOrigin::OlosDirect => f.write_str("olos-direct"),
            MpcOrigin::Stochastic => f.write_str("stochastic"),
            MpcOrigin::Scatterer(l) => write!(f, "scatterer:{l}"),
            MpcOrigin::Estimated => f.write_str("estimated"),
        }
    }
}

/// One multipath component. The path gain is stored in dB so that the CSV
/// interchange form reproduces it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Mpc {
    /// seconds
    pub delay: f64,
    /// 20·log10 of the linear amplitude gain
    pub gain_db: f64,
    /// degrees in [0, 360)
    pub azimuth: f64,
    /// degrees in [-90, 90]
    pub elevation: f64,
    pub cluster_id: Option<usize>,
    pub origin: MpcOrigin,
}

impl Mpc {
    /// Linear amplitude gain.
    pub fn gain(&self) -> f64 {
        10f64.powf(self.gain_db / 20.0)
    }

    pub fn power(&self) -> f64 {
        10f64.powf(self.gain_db / 10.0)
    }
}

/// Geometry and state of the link a multipath set belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkInfo {
    pub rx_index: usize,
    /// Tx–Rx distance, m
    pub distance: f64,
    pub state: LinkState,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MpcSet {
    pub link: Option<LinkInfo>,
    pub mpcs: Vec<Mpc>,
}

impl MpcSet {
    pub fn len(&self) -> usize {
        self.mpcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mpcs.is_empty()
    }

    pub fn sort_by_delay(&mut self) {
        self.mpcs.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    }

    pub fn total_power(&self) -> f64 {
        self.mpcs.iter().map(Mpc::power).sum()
    }

    pub fn direct(&self) -> Option<&Mpc> {
        self.mpcs.iter().find(|m| m.origin.is_direct())
    }

    /// Structural invariants of a synthesized set.
    pub fn check_synthesized(&self, clip_db: f64) -> Result<()> {
        let directs: Vec<&Mpc> = self.mpcs.iter().filter(|m| m.origin.is_direct()).collect();
        if directs.len() != 1 {
            return Err(Error::Domain(format!(
                "expected exactly one direct path, found {}",
                directs.len()
            )));
        }
        let direct_delay = directs[0].delay;
        for (i, m) in self.mpcs.iter().enumerate() {
            if !m.origin.is_direct() && m.delay < direct_delay {
                return Err(Error::Domain(format!("mpc {i} arrives before the direct path")));
            }
            if m.gain_db < clip_db {
                return Err(Error::Domain(format!("mpc {i} below the clip value")));
            }
            if !(0.0..360.0).contains(&m.azimuth) || !(-90.0..=90.0).contains(&m.elevation) {
                return Err(Error::Domain(format!("mpc {i} angle out of range")));
            }
        }
        if self.mpcs.windows(2).any(|w| w[0].delay > w[1].delay) {
            return Err(Error::Domain("mpcs not sorted by delay".into()));
        }
        Ok(())
    }
}

/// Large-scale parameters drawn for one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LargeScale {
    /// dB
    pub k: f64,
    /// seconds
    pub ds: f64,
    /// degrees
    pub asa: f64,
    /// degrees
    pub esa: f64,
    /// dB
    pub sf: f64,
}

fn lognormal_draw<R: Rng + ?Sized>(median: f64, sigma: f64, cap: f64, rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let x = median * 10f64.powf(sigma * z);
        if x <= cap {
            return x;
        }
    }
}

pub fn draw_large_scale<R: Rng + ?Sized>(p: &UmiCaseParams, rng: &mut R) -> LargeScale {
    let zk: f64 = StandardNormal.sample(rng);
    let k = p.k_mean + p.k_sigma * zk;
    let ds = lognormal_draw(p.ds_mean, p.ds_sigma, f64::INFINITY, rng);
    let asa = lognormal_draw(p.asa_mean, p.asa_sigma, ASA_CAP, rng);
    let esa = lognormal_draw(p.esa_mean, p.esa_sigma, ESA_CAP, rng);
    let zs: f64 = StandardNormal.sample(rng);
    LargeScale {
        k,
        ds,
        asa,
        esa,
        sf: p.sf_sigma * zs,
    }
}

/// `1 + Poisson(mean − 1)` clusters.
pub fn draw_cluster_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<usize> {
    if !(mean >= 1.0) {
        return Err(Error::Domain(format!("cluster count mean must be ≥ 1 (got {mean})")));
    }
    if mean == 1.0 {
        return Ok(1);
    }
    let poisson = Poisson::new(mean - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let extra: f64 = poisson.sample(rng);
    Ok(1 + extra as usize)
}

/// Cluster centre: the delay and arrival angles of its leading ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSkeleton {
    pub delay: f64,
    /// fraction of the link power
    pub power: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Cluster skeletons plus the unit offsets they were built from, so that
/// spreads can be re-targeted after rays are placed.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayout {
    pub large_scale: LargeScale,
    pub direct_delay: f64,
    pub direct_azimuth: f64,
    pub direct_elevation: f64,
    pub clusters: Vec<ClusterSkeleton>,
    /// Arrival elevations are kept inside this range, degrees.
    pub elevation_bounds: (f64, f64),
    unit_excess: Vec<f64>,
    unit_azimuth: Vec<f64>,
    unit_elevation: Vec<f64>,
}

impl ClusterLayout {
    fn place(&mut self, delay_scale: f64, az_scale: f64, el_scale: f64) {
        for (i, c) in self.clusters.iter_mut().enumerate() {
            c.delay = self.direct_delay + delay_scale * self.unit_excess[i];
            c.azimuth = wrap_deg(self.direct_azimuth + angle_offset(self.unit_azimuth[i], az_scale));
            c.elevation = clamp_to(
                self.direct_elevation + angle_offset(self.unit_elevation[i], el_scale),
                self.elevation_bounds,
            );
        }
    }

    /// K-factor of the skeleton in dB; +∞ for a single cluster.
    pub fn k_factor(&self) -> f64 {
        cluster_k(self.clusters.iter().map(|c| c.power))
    }
}

pub(crate) fn cluster_k(powers: impl Iterator<Item = f64>) -> f64 {
    let p: Vec<f64> = powers.collect();
    let (imax, pmax) = p
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    let rest: f64 = p.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, x)| x).sum();
    if rest <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (pmax / rest).log10()
    }
}

fn wrap_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

fn clamp_to(e: f64, bounds: (f64, f64)) -> f64 {
    e.clamp(bounds.0, bounds.1)
}

/// Finds a scale in `[0, s_max]` at which the monotone-ish spread function
/// reaches `target`. Falls back to the scale with the largest spread when the
/// target is out of reach.
fn solve_scale(target: f64, s_max: f64, f: impl Fn(f64) -> f64) -> f64 {
    if !(target > 0.0) || !(s_max > 0.0) {
        return 0.0;
    }
    if f(0.0) >= target {
        return 0.0;
    }
    const STEPS: usize = 128;
    let mut prev = 0.0;
    let mut best = (0.0, f(0.0));
    for i in 1..=STEPS {
        let s = s_max * i as f64 / STEPS as f64;
        let v = f(s);
        if v >= target {
            let (mut lo, mut hi) = (prev, s);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if f(mid) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return 0.5 * (lo + hi);
        }
        if v > best.1 {
            best = (s, v);
        }
        prev = s;
    }
    best.0
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Scaled angle offset, saturating at ±180°.
fn angle_offset(unit: f64, scale: f64) -> f64 {
    (scale * unit).clamp(-180.0, 180.0)
}

/// Scale at which every nonzero unit offset has saturated.
fn saturation_scale(units: &[f64]) -> f64 {
    let m = units
        .iter()
        .map(|u| u.abs())
        .filter(|u| *u > 1e-9)
        .fold(f64::INFINITY, f64::min);
    if m.is_finite() {
        180.0 / m
    } else {
        0.0
    }
}

/// Scale at which every nonzero unit elevation offset sits on a bound.
fn bound_saturation(units: &[f64], el0: f64, bounds: (f64, f64)) -> f64 {
    units
        .iter()
        .filter(|u| u.abs() > 1e-9)
        .map(|&u| if u > 0.0 { (bounds.1 - el0) / u } else { (bounds.0 - el0) / u })
        .fold(0.0, f64::max)
}

/// Builds the cluster skeleton of one link.
///
/// Cluster 0 is the direct path. The others get exponential excess delays
/// and exponential-in-delay powers with log-normal cluster shadowing; the
/// direct cluster's share is then fixed so the K-factor equals `ls.k`.
/// Offsets are scaled so the skeleton alone reproduces DS, ASA and ESA;
/// elevations stay inside `elevation_bounds` (widened to include the direct
/// path), which caps the reachable ESA.
pub fn generate_clusters<R: Rng + ?Sized>(
    ls: &LargeScale,
    n_clusters: usize,
    direct_delay: f64,
    direct_dir: (f64, f64),
    elevation_bounds: (f64, f64),
    synth: &SynthParams,
    rng: &mut R,
) -> Result<ClusterLayout> {
    if n_clusters == 0 {
        return Err(Error::Domain("need at least one cluster".into()));
    }
    let mut unit_excess: Vec<f64> = (1..n_clusters).map(|_| Exp1.sample(rng)).collect();
    unit_excess.sort_by(f64::total_cmp);
    unit_excess.insert(0, 0.0);

    let mut powers = vec![0.0; n_clusters];
    for i in 1..n_clusters {
        let z: f64 = StandardNormal.sample(rng);
        powers[i] = (-unit_excess[i] * (synth.delay_ratio - 1.0)).exp()
            * 10f64.powf(-synth.cluster_shadowing * z / 10.0);
    }
    if n_clusters == 1 {
        powers[0] = 1.0;
    } else {
        let k_lin = 10f64.powf(ls.k / 10.0);
        let others: f64 = powers[1..].iter().sum();
        let other_share = 1.0 / (1.0 + k_lin);
        for p in &mut powers[1..] {
            *p *= other_share / others;
        }
        powers[0] = k_lin / (1.0 + k_lin);
    }

    let mut unit_azimuth = vec![0.0];
    let mut unit_elevation = vec![0.0];
    for _ in 1..n_clusters {
        let a: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        unit_azimuth.push(a);
        unit_elevation.push(e);
    }

    let mut layout = ClusterLayout {
        large_scale: *ls,
        direct_delay,
        direct_azimuth: direct_dir.0,
        direct_elevation: direct_dir.1,
        elevation_bounds: (
            elevation_bounds.0.min(direct_dir.1).max(-90.0),
            elevation_bounds.1.max(direct_dir.1).min(90.0),
        ),
        clusters: powers
            .iter()
            .map(|&power| ClusterSkeleton {
                delay: direct_delay,
                power,
                azimuth: direct_dir.0,
                elevation: direct_dir.1,
            })
            .collect(),
        unit_excess,
        unit_azimuth,
        unit_elevation,
    };
    if n_clusters == 1 {
        return Ok(layout);
    }

    let unit_ds = weighted_delay_spread(&powers, &layout.unit_excess);
    let delay_scale = if unit_ds > 0.0 { ls.ds / unit_ds } else { 0.0 };

    let az_scale = solve_scale(ls.asa, saturation_scale(&layout.unit_azimuth), |s| {
        let az: Vec<f64> = layout
            .unit_azimuth
            .iter()
            .map(|&u| direct_dir.0 + angle_offset(u, s))
            .collect();
        weighted_circular_spread(&powers, &az)
    });
    let bounds = layout.elevation_bounds;
    let el_max = bound_saturation(&layout.unit_elevation, direct_dir.1, bounds);
    let el_scale = solve_scale(ls.esa, el_max, |s| {
        let el: Vec<f64> = layout
            .unit_elevation
            .iter()
            .map(|&u| clamp_to(direct_dir.1 + angle_offset(u, s), bounds))
            .collect();
        weighted_circular_spread(&powers, &el)
    });
    layout.place(delay_scale, az_scale, el_scale);
    Ok(layout)
}

/// Intra-cluster offsets of one ray relative to its cluster centre.
#[derive(Debug, Clone, Copy)]
struct RayOffset {
    weight: f64,
    delay: f64,
    azimuth: f64,
    elevation: f64,
}

/// Power decay across a cluster's rays, nepers from first to last.
const RAY_DECAY: f64 = 2.0;
/// Ray delay jitter, in units of the ray spacing.
const RAY_JITTER: f64 = 0.15;
/// Angular scatter about the delay-angle drift, in units of the spacing.
const RAY_SCATTER: f64 = 2.0;

/// Rays evenly spread in delay (with jitter) under an exponential power
/// profile. Arrival angles drift with delay, as off an extended scatterer,
/// plus Gaussian scatter. This keeps a cluster's rays chained at the
/// density the clustering expects.
fn draw_ray_offsets<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<RayOffset> {
    let mut rays = vec![RayOffset {
        weight: 1.0,
        delay: 0.0,
        azimuth: 0.0,
        elevation: 0.0,
    }];
    let sa = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let se = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let spacing = 1.0 / (n - 1).max(1) as f64;
    for i in 1..n {
        let d = (i as f64 + RAY_JITTER * rng.random_range(-1.0..1.0)) * spacing;
        let a: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        let (a, e) = (sa * d + RAY_SCATTER * spacing * a, se * d + RAY_SCATTER * spacing * e);
        rays.push(RayOffset {
            weight: (-RAY_DECAY * d).exp(),
            delay: d,
            azimuth: a,
            elevation: e,
        });
    }
    rays
}

/// Rescales unit offsets so the cluster's spreads equal the targets exactly.
fn fit_ray_offsets(rays: &mut [RayOffset], cds: f64, casa: f64, cesa: f64) {
    let w: Vec<f64> = rays.iter().map(|r| r.weight).collect();
    let d: Vec<f64> = rays.iter().map(|r| r.delay).collect();
    let unit = weighted_delay_spread(&w, &d);
    let ds = if unit > 0.0 { cds / unit } else { 0.0 };

    let a: Vec<f64> = rays.iter().map(|r| r.azimuth).collect();
    let az_max = 180.0 / max_abs(&a).max(1e-9);
    let az = solve_scale(casa, az_max, |s| {
        let v: Vec<f64> = a.iter().map(|x| s * x).collect();
        weighted_circular_spread(&w, &v)
    });
    let e: Vec<f64> = rays.iter().map(|r| r.elevation).collect();
    let el_max = 90.0 / max_abs(&e).max(1e-9);
    let el = solve_scale(cesa, el_max, |s| {
        let v: Vec<f64> = e.iter().map(|x| s * x).collect();
        weighted_circular_spread(&w, &v)
    });
    for r in rays.iter_mut() {
        r.delay *= ds;
        r.azimuth *= az;
        r.elevation *= el;
    }
}

/// What a thresholded measurement of the link can see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    /// dB below the strongest ray
    pub dynamic_range: f64,
    /// Weakest visible ray power as a fraction of the link's total power.
    pub floor: f64,
}

impl Visibility {
    /// Nothing is dropped.
    pub fn all() -> Self {
        Self {
            dynamic_range: f64::INFINITY,
            floor: 0.0,
        }
    }
}

/// Expands every cluster into rays and re-targets the link-level spreads.
///
/// Each cluster gets `synth.rays_per_cluster` rays whose delay, azimuth and
/// elevation spreads equal the configured CDS, CASA and CESA (the link DS,
/// ASA and ESA when the link has a single cluster). Rays a thresholded
/// measurement would miss are dropped and the weaker clusters rescaled so
/// the K-factor of the surviving rays still equals the drawn one; when a
/// cluster cannot stay visible at that K, it is lifted to the visibility
/// level and the K-factor gives way. Gains of the returned set are
/// relative: total power is one.
pub fn generate_rays<R: Rng + ?Sized>(
    layout: &ClusterLayout,
    case: &UmiCaseParams,
    synth: &SynthParams,
    direct_origin: MpcOrigin,
    visibility: Visibility,
    rng: &mut R,
) -> Result<Vec<Mpc>> {
    if layout.clusters.is_empty() {
        return Err(Error::Empty("cluster skeleton"));
    }
    let n_rays = synth.rays_per_cluster.max(1);
    let single = layout.clusters.len() == 1;
    let ls = &layout.large_scale;
    let (cds, casa, cesa) = if single {
        (ls.ds, ls.asa, ls.esa)
    } else {
        (case.cds(), case.casa(), case.cesa())
    };

    let mut offsets: Vec<Vec<RayOffset>> = Vec::with_capacity(layout.clusters.len());
    for _ in &layout.clusters {
        let mut rays = draw_ray_offsets(n_rays, rng);
        fit_ray_offsets(&mut rays, cds, casa, cesa);
        let total: f64 = rays.iter().map(|r| r.weight).sum();
        for r in &mut rays {
            r.weight /= total;
        }
        offsets.push(rays);
    }

    let mut layout = layout.clone();
    let keep = drop_weak_rays(&mut layout, &offsets, visibility);
    if !single && n_rays > 1 {
        retarget(&mut layout, &mut offsets, &keep);
    }

    let mut out = Vec::with_capacity(layout.clusters.len() * n_rays);
    for (ci, (c, rays)) in layout.clusters.iter().zip(&offsets).enumerate() {
        for (ri, r) in rays.iter().enumerate() {
            if !keep[ci][ri] {
                continue;
            }
            let origin = if ci == 0 && ri == 0 {
                direct_origin.clone()
            } else {
                MpcOrigin::Stochastic
            };
            out.push(Mpc {
                delay: c.delay + r.delay,
                gain_db: 10.0 * (c.power * r.weight).log10(),
                azimuth: wrap_deg(c.azimuth + r.azimuth),
                elevation: clamp_to(c.elevation + r.elevation, layout.elevation_bounds),
                cluster_id: Some(ci),
                origin,
            });
        }
    }
    let total: f64 = out.iter().map(Mpc::power).sum();
    for m in &mut out {
        m.gain_db -= 10.0 * total.log10();
    }
    out.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    Ok(out)
}

/// Headroom of a cluster's leading ray above the drop level, dB.
const CLUSTER_MARGIN_DB: f64 = 3.0;

/// Marks the rays a measurement would see, rescaling the non-dominant
/// clusters until the kept rays carry the drawn K-factor with every
/// cluster's leading ray visible. When both cannot hold, visibility wins
/// and the K-factor of the link comes out below the drawn one.
fn drop_weak_rays(layout: &mut ClusterLayout, offsets: &[Vec<RayOffset>], vis: Visibility) -> Vec<Vec<bool>> {
    let mut keep: Vec<Vec<bool>> = offsets.iter().map(|r| vec![true; r.len()]).collect();
    if !vis.dynamic_range.is_finite() && !(vis.floor > 0.0) {
        return keep;
    }
    let peak: Vec<f64> = offsets.iter().map(|rays| rays.iter().map(|r| r.weight).fold(0.0, f64::max)).collect();
    let n = layout.clusters.len();
    let dom = (0..n).fold(0, |a, i| if layout.clusters[i].power > layout.clusters[a].power { i } else { a });
    let drawn: Vec<f64> = layout.clusters.iter().map(|c| c.power).collect();
    if !settle(layout, offsets, &peak, dom, vis, &mut keep, true) {
        for (c, &p) in layout.clusters.iter_mut().zip(&drawn) {
            c.power = p;
        }
        settle(layout, offsets, &peak, dom, vis, &mut keep, false);
    }
    keep[0][0] = true;
    keep
}

fn kept_power(layout: &ClusterLayout, offsets: &[Vec<RayOffset>], keep: &[Vec<bool>], i: usize) -> f64 {
    let c = layout.clusters[i].power;
    offsets[i].iter().zip(&keep[i]).filter(|(_, f)| **f).map(|(r, _)| c * r.weight).sum()
}

/// Lifts weak leading rays to the visibility level and marks the kept rays;
/// with `exact_k`, also iterates the K-factor rescaling and reports whether
/// it converged.
fn settle(
    layout: &mut ClusterLayout,
    offsets: &[Vec<RayOffset>],
    peak: &[f64],
    dom: usize,
    vis: Visibility,
    keep: &mut [Vec<bool>],
    exact_k: bool,
) -> bool {
    let n = layout.clusters.len();
    let k_lin = 10f64.powf(layout.large_scale.k / 10.0);
    let rel = 10f64.powf(-vis.dynamic_range / 10.0);
    let margin = 10f64.powf(CLUSTER_MARGIN_DB / 10.0);
    for _ in 0..64 {
        let strongest = (0..n).map(|i| layout.clusters[i].power * peak[i]).fold(0.0, f64::max);
        let total: f64 = (0..n).map(|i| kept_power(layout, offsets, keep, i)).sum();
        let level = (strongest * rel).max(vis.floor * total);
        for (i, c) in layout.clusters.iter_mut().enumerate() {
            if i != dom && c.power * peak[i] < level * margin {
                c.power = level * margin / peak[i];
            }
        }
        for (i, k) in keep.iter_mut().enumerate() {
            let c = layout.clusters[i].power;
            for (r, flag) in offsets[i].iter().zip(k.iter_mut()) {
                *flag = c * r.weight >= level;
            }
        }
        if n == 1 || !exact_k {
            return true;
        }
        let rest: f64 = (0..n).filter(|&i| i != dom).map(|i| kept_power(layout, offsets, keep, i)).sum();
        if !(rest > 0.0) {
            return false;
        }
        let scale = kept_power(layout, offsets, keep, dom) / (k_lin * rest);
        if (scale - 1.0).abs() < 1e-9 {
            return true;
        }
        for (i, c) in layout.clusters.iter_mut().enumerate() {
            if i != dom {
                c.power *= scale;
            }
        }
    }
    false
}

/// Scales cluster offsets so the full ray set matches the link DS/ASA/ESA.
/// An elevation target the cluster offsets cannot reach within the bounds
/// is made up by widening the rays around each cluster.
fn retarget(layout: &mut ClusterLayout, offsets: &mut [Vec<RayOffset>], keep: &[Vec<bool>]) {
    let ls = layout.large_scale;
    let mut w = Vec::new();
    for ((c, rays), k) in layout.clusters.iter().zip(offsets.iter()).zip(keep) {
        for (r, &kept) in rays.iter().zip(k) {
            w.push(if kept { c.power * r.weight } else { 0.0 });
        }
    }
    let expand = |offsets: &[Vec<RayOffset>], unit: &[f64], base: f64, s: f64, ray: &dyn Fn(&RayOffset) -> f64| {
        let mut v = Vec::with_capacity(w.len());
        for (u, rays) in unit.iter().zip(offsets) {
            for r in rays {
                v.push(base + angle_offset(*u, s) + ray(r));
            }
        }
        v
    };

    let ue = layout.unit_excess.clone();
    let max_e = max_abs(&ue).max(1e-12);
    let delay_scale = solve_scale(ls.ds, 1000.0 * ls.ds / max_e, |s| {
        weighted_delay_spread(&w, &expand(offsets, &ue, 0.0, s, &|r| r.delay))
    });

    let ua = layout.unit_azimuth.clone();
    let az0 = layout.direct_azimuth;
    let az_scale = solve_scale(ls.asa, saturation_scale(&ua), |s| {
        weighted_circular_spread(&w, &expand(offsets, &ua, az0, s, &|r| r.azimuth))
    });

    let uel = layout.unit_elevation.clone();
    let el0 = layout.direct_elevation;
    let bounds = layout.elevation_bounds;
    let el_spread = |offsets: &[Vec<RayOffset>], s: f64, g: f64| {
        let v: Vec<f64> = expand(offsets, &uel, el0, s, &|r| g * r.elevation)
            .into_iter()
            .map(|e| clamp_to(e, bounds))
            .collect();
        weighted_circular_spread(&w, &v)
    };
    let el_scale = solve_scale(ls.esa, bound_saturation(&uel, el0, bounds), |s| el_spread(offsets, s, 1.0));
    if el_spread(offsets, el_scale, 1.0) < ls.esa * (1.0 - 1e-6) {
        let ray_max = offsets.iter().flatten().map(|r| r.elevation.abs()).fold(0.0, f64::max);
        if ray_max > 1e-9 {
            let g = solve_scale(ls.esa, (bounds.1 - bounds.0) / ray_max, |g| el_spread(offsets, el_scale, g)).max(1.0);
            offsets.iter_mut().flatten().for_each(|r| r.elevation *= g);
        }
    }
    layout.place(delay_scale, az_scale, el_scale);
}

/// Echoes off the scene's point scatterers as seen from one Rx position.
///
/// The echo travels Tx → scatterer → Rx and loses free-space loss over the
/// unfolded length plus the scatterer's reflectivity. Scatterers with a
/// facing direction reflect only between points on the same side of their
/// face; when both ends see the back face the echo pays the back-scatter
/// penalty. Echoes below `clip_db` are dropped.
pub fn scene_echoes(
    scene: &Scene,
    rx_index: usize,
    freq: f64,
    backscatter_penalty: f64,
    clip_db: f64,
) -> Result<Vec<Mpc>> {
    let rx = scene.rx(rx_index)?;
    let tx = scene.tx_position;
    let mut out = Vec::new();
    for s in &scene.scatterers {
        let d1 = norm(sub(s.position, tx));
        let to_rx = sub(rx, s.position);
        let d2 = norm(to_rx);
        let penalty = match s.facing {
            None => 0.0,
            Some(f) => {
                let n = [f.to_radians().cos(), f.to_radians().sin(), 0.0];
                let side = |p: [f64; 3]| {
                    let v = sub(p, s.position);
                    n[0] * v[0] + n[1] * v[1] + n[2] * v[2] >= -1e-9
                };
                match (side(tx), side(rx)) {
                    (true, true) => 0.0,
                    (false, false) => backscatter_penalty,
                    _ => continue,
                }
            }
        };
        let loss = fspl(freq, d1 + d2)? + s.reflectivity + penalty;
        if -loss < clip_db {
            continue;
        }
        let (az, el) = if d2 > 1e-9 {
            direction_deg(sub(s.position, rx))
        } else {
            direction_deg(sub(tx, rx))
        };
        out.push(Mpc {
            delay: (d1 + d2) / SPEED_OF_LIGHT,
            gain_db: -loss,
            azimuth: wrap_deg(az),
            elevation: el,
            cluster_id: None,
            origin: MpcOrigin::Scatterer(s.label.clone()),
        });
    }
    Ok(out)
}

/// Full link synthesis: classification, then [`synthesize_classified`].
pub fn synthesize_link<R: Rng + ?Sized>(
    scene: &Scene,
    rx_index: usize,
    params: &ParamBundle,
    rng: &mut R,
) -> Result<MpcSet> {
    let state = classify_link(scene, rx_index, &params.foliage, rng)?;
    synthesize_classified(scene, rx_index, state, params, rng)
}

/// Synthesizes a link whose LoS/OLoS state is already known.
///
/// The stochastic set is scaled so its total power follows the close-in
/// model of the link's case (plus the foliage loss when
/// `synth.apply_foliage_loss` is set). Scene echoes keep their own absolute
/// gains.
pub fn synthesize_classified<R: Rng + ?Sized>(
    scene: &Scene,
    rx_index: usize,
    state: LinkState,
    params: &ParamBundle,
    rng: &mut R,
) -> Result<MpcSet> {
    let case = params.case(state.case);
    let ls = draw_large_scale(case, rng);
    let n = draw_cluster_count(case.n_clusters_mean, rng)?;
    let distance = scene.distance(rx_index)?;
    let direct_delay = distance / SPEED_OF_LIGHT;
    let dir = scene.direct_aoa(rx_index)?;
    let g = &params.grid;
    let half = params.rx_antenna.hpbw / 2.0;
    let bounds = (
        g.elevation_start.min(g.elevation_stop) - half,
        g.elevation_start.max(g.elevation_stop) + half,
    );
    let layout = generate_clusters(&ls, n, direct_delay, dir, bounds, &params.synth, rng)?;
    let direct_origin = match state.case {
        LinkCase::Los => MpcOrigin::Los,
        LinkCase::Olos => MpcOrigin::OlosDirect,
    };
    let mut loss = ci_path_loss(params.plan.center_freq, distance, case.ple, ls.sf)?;
    if params.synth.apply_foliage_loss {
        loss += state.foliage_loss;
    }
    let visibility = Visibility {
        dynamic_range: params.sounder.dynamic_range_r,
        floor: 10f64.powf((params.sounder.noise_floor + 5.0 + loss) / 10.0),
    };
    let mut mpcs = generate_rays(&layout, case, &params.synth, direct_origin, visibility, rng)?;
    let clip = params.sounder.pdp_clip_value;
    for m in &mut mpcs {
        m.gain_db -= loss;
    }
    mpcs.retain(|m| m.origin.is_direct() || m.gain_db >= clip);
    mpcs.extend(scene_echoes(
        scene,
        rx_index,
        params.plan.center_freq,
        params.synth.backscatter_penalty,
        clip,
    )?);
    let mut set = MpcSet {
        link: Some(LinkInfo {
            rx_index,
            distance,
            state,
        }),
        mpcs,
    };
    set.sort_by_delay();
    Ok(set)
}

const CSV_HEADER: &str = "delay_s,gain_db,az_deg,el_deg,cluster_id,origin";

/// Writes the MpcSet interchange CSV. Link metadata goes into leading
/// `# key=value` comment lines.
pub fn write_mpc_csv<W: Write>(mut w: W, set: &MpcSet) -> std::io::Result<()> {
    if let Some(l) = &set.link {
        writeln!(w, "# rx_index={}", l.rx_index)?;
        writeln!(w, "# distance={}", l.distance)?;
        writeln!(w, "# case={}", l.state.case)?;
        writeln!(w, "# foliage_loss={}", l.state.foliage_loss)?;
    }
    writeln!(w, "{CSV_HEADER}")?;
    for m in &set.mpcs {
        let cid = m.cluster_id.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.delay, m.gain_db, m.azimuth, m.elevation, cid, m.origin
        )?;
    }
    Ok(())
}

pub fn read_mpc_csv<R: BufRead>(r: R, path: &Path) -> Result<MpcSet> {
    let schema = |msg: String| Error::schema(path, msg);
    let mut meta = std::collections::BTreeMap::new();
    let mut set = MpcSet::default();
    let mut header_seen = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some((k, v)) = c.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if !header_seen {
            if line != CSV_HEADER {
                return Err(schema(format!("expected header `{CSV_HEADER}`, got `{line}`")));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(schema(format!("line {}: expected 6 fields", lineno + 1)));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| schema(format!("line {}: bad {what} `{s}`", lineno + 1)))
        };
        set.mpcs.push(Mpc {
            delay: num(f[0], "delay_s")?,
            gain_db: num(f[1], "gain_db")?,
            azimuth: num(f[2], "az_deg")?,
            elevation: num(f[3], "el_deg")?,
            cluster_id: if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse().map_err(|_| {
                    schema(format!("line {}: bad cluster_id `{}`", lineno + 1, f[4]))
                })?)
            },
            origin: MpcOrigin::parse(f[5])
                .ok_or_else(|| schema(format!("line {}: bad origin `{}`", lineno + 1, f[5])))?,
        });
    }
    if !header_seen {
        return Err(schema("missing header".into()));
    }
    if let (Some(i), Some(d), Some(c)) = (meta.get("rx_index"), meta.get("distance"), meta.get("case")) {
        let bad = |k: &str| schema(format!("bad metadata `{k}`"));
        set.link = Some(LinkInfo {
            rx_index: i.parse().map_err(|_| bad("rx_index"))?,
            distance: d.parse().map_err(|_| bad("distance"))?,
            state: LinkState {
                case: LinkCase::parse(c).ok_or_else(|| bad("case"))?,
                foliage_loss: meta
                    .get("foliage_loss")
                    .map(|v| v.parse().map_err(|_| bad("foliage_loss")))
                    .transpose()?
                    .unwrap_or(0.0),
            },
        });
    }
    Ok(set)
}

pub fn save_mpc_csv(path: &Path, set: &MpcSet) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_mpc_csv(&mut w, set).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mpc_csv(path: &Path) -> Result<MpcSet> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_mpc_csv(std::io::BufReader::new(f), path)
}
