//! Configuration and fitted-parameter types shared by every stage.
//!
//! A [`ParamBundle`] is loaded from a TOML file in which every table and key
//! is optional; absent entries take the defaults below. Derived quantities
//! such as the delay resolution are methods, never stored fields, so they
//! cannot disagree with the values they derive from.
//!
//! Key tree (all keys optional):
//!
//! ```toml
//! [plan]        # center_freq (Hz), bandwidth (Hz), n_samples, extended_samples
//! [grid]        # azimuth_start/stop/step, elevation_start/stop/step (deg)
//! [tx_antenna]  # boresight_gain (dBi), hpbw (deg), kind, sidelobe_floor (dB)
//! [rx_antenna]
//! [los]         # ple, sf_sigma, k_mean, k_sigma, ds_mean (s), ds_sigma,
//! [olos]        # asa_mean, asa_sigma, esa_mean, esa_sigma, n_clusters_mean,
//!               # cds_mean (s), casa_mean, cesa_mean
//! [foliage]     # loss_mean, loss_sigma, clamp_range = [lo, hi]
//! [sounder]     # noise_floor, pdp_clip_value, dynamic_range_r, averaging_count,
//!               # dwell_time (s), noise_margin (dB), add_noise
//! [synth]       # rays_per_cluster, backscatter_penalty, apply_foliage_loss,
//!               # delay_ratio, cluster_shadowing
//! [clustering]  # eps, min_pts, delay_weight
//! [drift]       # offset_at_t0 (s), slope (s/s)
//! [roundtrip]   # min_distance, max_distance (m), estimator_dynamic_range (dB)
//! [scene]       # tx_position, rx_positions, scatterers, foliage_segments
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::propagation::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyPlan {
    pub center_freq: f64,
    pub bandwidth: f64,
    pub n_samples: usize,
    pub extended_samples: usize,
}

impl Default for FrequencyPlan {
    fn default() -> Self {
        Self {
            center_freq: 220e9,
            bandwidth: 1.536e9,
            n_samples: 2048,
            extended_samples: 2154,
        }
    }
}

impl FrequencyPlan {
    /// Width of one delay bin in seconds.
    pub fn delay_resolution(&self) -> f64 {
        1.0 / self.bandwidth
    }

    /// Unambiguous delay range of a native-length CIR.
    pub fn max_delay(&self) -> f64 {
        self.n_samples as f64 / self.bandwidth
    }

    /// Number of samples appended by de-alias extension.
    pub fn extension_len(&self) -> usize {
        self.extended_samples.saturating_sub(self.n_samples)
    }

    /// Delay range after de-alias extension.
    pub fn extended_max_delay(&self) -> f64 {
        self.extended_samples as f64 / self.bandwidth
    }
}

/// Direction-scan grid. Stops are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanGrid {
    pub azimuth_start: f64,
    pub azimuth_stop: f64,
    pub azimuth_step: f64,
    pub elevation_start: f64,
    pub elevation_stop: f64,
    pub elevation_step: f64,
}

impl Default for ScanGrid {
    fn default() -> Self {
        Self {
            azimuth_start: 0.0,
            azimuth_stop: 350.0,
            azimuth_step: 10.0,
            elevation_start: -20.0,
            elevation_stop: 20.0,
            elevation_step: 10.0,
        }
    }
}

fn axis_len(start: f64, stop: f64, step: f64) -> usize {
    ((stop - start) / step).round() as usize + 1
}

impl ScanGrid {
    pub fn n_azimuth(&self) -> usize {
        axis_len(self.azimuth_start, self.azimuth_stop, self.azimuth_step)
    }

    pub fn n_elevation(&self) -> usize {
        axis_len(self.elevation_start, self.elevation_stop, self.elevation_step)
    }

    pub fn len(&self) -> usize {
        self.n_azimuth() * self.n_elevation()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn azimuth(&self, i: usize) -> f64 {
        self.azimuth_start + i as f64 * self.azimuth_step
    }

    pub fn elevation(&self, j: usize) -> f64 {
        self.elevation_start + j as f64 * self.elevation_step
    }

    /// Azimuth-major flat index: all elevations of one azimuth are adjacent.
    pub fn index(&self, az_idx: usize, el_idx: usize) -> usize {
        az_idx * self.n_elevation() + el_idx
    }

    pub fn split_index(&self, idx: usize) -> (usize, usize) {
        (idx / self.n_elevation(), idx % self.n_elevation())
    }

    /// Steering (azimuth, elevation) of a flat index, in degrees.
    pub fn direction(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.split_index(idx);
        (self.azimuth(i), self.elevation(j))
    }

    /// True when the azimuth axis closes on itself (covers the full circle).
    pub fn azimuth_wraps(&self) -> bool {
        ((self.n_azimuth() as f64) * self.azimuth_step - 360.0).abs() < 1e-9
    }

    /// Flat index of an exact grid direction.
    pub fn find(&self, az: f64, el: f64) -> Option<usize> {
        let ai = (az - self.azimuth_start) / self.azimuth_step;
        let ej = (el - self.elevation_start) / self.elevation_step;
        if (ai - ai.round()).abs() > 1e-9 || (ej - ej.round()).abs() > 1e-9 {
            return None;
        }
        if ai < -1e-9 || ej < -1e-9 {
            return None;
        }
        let (ai, ej) = (ai.round() as usize, ej.round() as usize);
        (ai < self.n_azimuth() && ej < self.n_elevation()).then(|| self.index(ai, ej))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AntennaKind {
    /// Open waveguide: constant gain over the half space it illuminates.
    Waveguide,
    Horn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AntennaPattern {
    /// dBi
    pub boresight_gain: f64,
    /// degrees
    pub hpbw: f64,
    pub kind: AntennaKind,
    /// Side-lobe floor relative to boresight, dB (negative).
    pub sidelobe_floor: f64,
}

impl Default for AntennaPattern {
    fn default() -> Self {
        Self::rx_horn()
    }
}

impl AntennaPattern {
    pub fn rx_horn() -> Self {
        Self {
            boresight_gain: 26.0,
            hpbw: 8.0,
            kind: AntennaKind::Horn,
            sidelobe_floor: -30.0,
        }
    }

    pub fn tx_waveguide() -> Self {
        Self {
            boresight_gain: 7.0,
            hpbw: 180.0,
            kind: AntennaKind::Waveguide,
            sidelobe_floor: -30.0,
        }
    }
}

/// Statistical parameters of one propagation case.
///
/// Log-normal quantities are stored by their linear-unit median (`10^mu`,
/// where `mu` is the log10-domain mean) and a log10-domain sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmiCaseParams {
    pub ple: f64,
    /// dB
    pub sf_sigma: f64,
    /// dB
    pub k_mean: f64,
    /// dB
    pub k_sigma: f64,
    /// seconds
    pub ds_mean: f64,
    pub ds_sigma: f64,
    /// degrees
    pub asa_mean: f64,
    pub asa_sigma: f64,
    /// degrees
    pub esa_mean: f64,
    pub esa_sigma: f64,
    pub n_clusters_mean: f64,
    /// seconds; defaults to `ds_mean / 5` when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cds_mean: Option<f64>,
    /// degrees; defaults to `asa_mean / 3` when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub casa_mean: Option<f64>,
    /// degrees; defaults to `esa_mean / 2` when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cesa_mean: Option<f64>,
}

impl Default for UmiCaseParams {
    fn default() -> Self {
        Self::los()
    }
}

impl UmiCaseParams {
    pub fn los() -> Self {
        Self {
            ple: 1.91,
            sf_sigma: 1.32,
            k_mean: 17.54,
            k_sigma: 3.0,
            ds_mean: 20.89e-9,
            ds_sigma: 0.3,
            asa_mean: 13.18,
            asa_sigma: 0.3,
            esa_mean: 3.98,
            esa_sigma: 0.3,
            n_clusters_mean: 2.56,
            cds_mean: None,
            casa_mean: None,
            cesa_mean: None,
        }
    }

    pub fn olos() -> Self {
        Self {
            ple: 2.38,
            sf_sigma: 5.58,
            k_mean: 8.68,
            k_sigma: 3.0,
            ds_mean: 74.13e-9,
            ds_sigma: 0.3,
            asa_mean: 38.90,
            asa_sigma: 0.3,
            esa_mean: 6.92,
            esa_sigma: 0.3,
            n_clusters_mean: 4.14,
            cds_mean: None,
            casa_mean: None,
            cesa_mean: None,
        }
    }

    /// Sets every spread parameter to zero, turning draws into constants.
    pub fn without_spread(mut self) -> Self {
        self.sf_sigma = 0.0;
        self.k_sigma = 0.0;
        self.ds_sigma = 0.0;
        self.asa_sigma = 0.0;
        self.esa_sigma = 0.0;
        self
    }

    pub fn cds(&self) -> f64 {
        self.cds_mean.unwrap_or(self.ds_mean / 5.0)
    }

    pub fn casa(&self) -> f64 {
        self.casa_mean.unwrap_or(self.asa_mean / 3.0)
    }

    pub fn cesa(&self) -> f64 {
        self.cesa_mean.unwrap_or(self.esa_mean / 2.0)
    }

    /// Names of intra-cluster parameters that fell back to derived defaults.
    pub fn fallback_defaults(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.cds_mean.is_none() {
            out.push("cds_mean");
        }
        if self.casa_mean.is_none() {
            out.push("casa_mean");
        }
        if self.cesa_mean.is_none() {
            out.push("cesa_mean");
        }
        out
    }

    fn check(&self, prefix: &str, out: &mut Vec<Violation>) {
        let f = |name: &str| format!("{prefix}.{name}");
        if !(self.ple > 0.0) {
            out.push(Violation::new(f("ple"), "ple > 0"));
        }
        for (name, v) in [
            ("sf_sigma", self.sf_sigma),
            ("k_sigma", self.k_sigma),
            ("ds_sigma", self.ds_sigma),
            ("asa_sigma", self.asa_sigma),
            ("esa_sigma", self.esa_sigma),
        ] {
            if !(v >= 0.0) {
                out.push(Violation::new(f(name), format!("{name} ≥ 0")));
            }
        }
        for (name, v) in [
            ("ds_mean", self.ds_mean),
            ("asa_mean", self.asa_mean),
            ("esa_mean", self.esa_mean),
        ] {
            if !(v > 0.0) {
                out.push(Violation::new(f(name), format!("{name} > 0")));
            }
        }
        if !self.k_mean.is_finite() {
            out.push(Violation::new(f("k_mean"), "k_mean must be finite"));
        }
        if !(self.n_clusters_mean >= 1.0) {
            out.push(Violation::new(f("n_clusters_mean"), "n_clusters_mean ≥ 1"));
        }
        for (name, v) in [
            ("cds_mean", self.cds_mean),
            ("casa_mean", self.casa_mean),
            ("cesa_mean", self.cesa_mean),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    out.push(Violation::new(f(name), format!("{name} ≥ 0")));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoliageParams {
    /// dB
    pub loss_mean: f64,
    /// dB
    pub loss_sigma: f64,
    /// [low, high] dB
    pub clamp_range: [f64; 2],
}

impl Default for FoliageParams {
    fn default() -> Self {
        Self {
            loss_mean: 16.74,
            loss_sigma: 7.26,
            clamp_range: [5.0, 32.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SounderParams {
    /// CIR noise floor after averaging, dB.
    pub noise_floor: f64,
    /// Value written into noise-eliminated PDP bins, dB.
    pub pdp_clip_value: f64,
    /// Dynamic range R of the MPC threshold, dB.
    pub dynamic_range_r: f64,
    pub averaging_count: u32,
    /// Dwell per scan direction, seconds.
    pub dwell_time: f64,
    /// The simulated noise power sits this many dB below `noise_floor`,
    /// which then acts as a ceiling for noise samples.
    pub noise_margin: f64,
    pub add_noise: bool,
}

impl Default for SounderParams {
    fn default() -> Self {
        Self {
            noise_floor: -170.0,
            pdp_clip_value: -200.0,
            dynamic_range_r: 30.0,
            averaging_count: 5000,
            dwell_time: 2.0,
            noise_margin: 12.0,
            add_noise: true,
        }
    }
}

impl SounderParams {
    /// Mean power of a simulated noise sample, dB.
    pub fn noise_power_db(&self) -> f64 {
        self.noise_floor - self.noise_margin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub rays_per_cluster: usize,
    /// Extra loss for echoes off the back face of a scatterer, dB.
    pub backscatter_penalty: f64,
    /// Scale the whole stochastic set by the link's foliage loss as well.
    pub apply_foliage_loss: bool,
    /// Ratio between the delay and the power-decay scales of clusters.
    pub delay_ratio: f64,
    /// Per-cluster shadowing std, dB.
    pub cluster_shadowing: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            rays_per_cluster: 10,
            backscatter_penalty: 20.0,
            apply_foliage_loss: false,
            delay_ratio: 3.0,
            cluster_shadowing: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringParams {
    pub eps: f64,
    pub min_pts: usize,
    /// Delay weight ζ of the multipath component distance.
    pub delay_weight: f64,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            eps: 0.2,
            min_pts: 2,
            delay_weight: 8.0,
        }
    }
}

/// Linear clock drift between the Tx and Rx trigger references.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftModel {
    /// seconds
    pub offset_at_t0: f64,
    /// seconds per second
    pub slope: f64,
}

impl DriftModel {
    pub fn offset_at(&self, t: f64) -> f64 {
        self.offset_at_t0 + self.slope * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundtripParams {
    /// Tx–Rx distance range of synthetic links, m (log-uniform).
    pub min_distance: f64,
    pub max_distance: f64,
    /// Dynamic range R applied by the estimator only, dB. Setting it to 0
    /// cripples extraction on purpose, as a negative control.
    pub estimator_dynamic_range: Option<f64>,
}

impl Default for RoundtripParams {
    fn default() -> Self {
        Self {
            min_distance: 50.0,
            max_distance: 400.0,
            estimator_dynamic_range: None,
        }
    }
}

// Partial tables are merged over the right base: a partial `[olos]` table
// must fall back to OLoS values, not to `UmiCaseParams::default()`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseOverrides {
    ple: Option<f64>,
    sf_sigma: Option<f64>,
    k_mean: Option<f64>,
    k_sigma: Option<f64>,
    ds_mean: Option<f64>,
    ds_sigma: Option<f64>,
    asa_mean: Option<f64>,
    asa_sigma: Option<f64>,
    esa_mean: Option<f64>,
    esa_sigma: Option<f64>,
    n_clusters_mean: Option<f64>,
    cds_mean: Option<f64>,
    casa_mean: Option<f64>,
    cesa_mean: Option<f64>,
}

impl CaseOverrides {
    fn apply(self, mut b: UmiCaseParams) -> UmiCaseParams {
        macro_rules! merge {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { b.$f = v; } )* };
        }
        merge!(
            ple, sf_sigma, k_mean, k_sigma, ds_mean, ds_sigma, asa_mean, asa_sigma, esa_mean,
            esa_sigma, n_clusters_mean
        );
        if self.cds_mean.is_some() {
            b.cds_mean = self.cds_mean;
        }
        if self.casa_mean.is_some() {
            b.casa_mean = self.casa_mean;
        }
        if self.cesa_mean.is_some() {
            b.cesa_mean = self.cesa_mean;
        }
        b
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AntennaOverrides {
    boresight_gain: Option<f64>,
    hpbw: Option<f64>,
    kind: Option<AntennaKind>,
    sidelobe_floor: Option<f64>,
}

impl AntennaOverrides {
    fn apply(self, mut b: AntennaPattern) -> AntennaPattern {
        if let Some(v) = self.boresight_gain {
            b.boresight_gain = v;
        }
        if let Some(v) = self.hpbw {
            b.hpbw = v;
        }
        if let Some(v) = self.kind {
            b.kind = v;
        }
        if let Some(v) = self.sidelobe_floor {
            b.sidelobe_floor = v;
        }
        b
    }
}

fn de_los<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<UmiCaseParams, D::Error> {
    CaseOverrides::deserialize(d).map(|o| o.apply(UmiCaseParams::los()))
}

fn de_olos<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<UmiCaseParams, D::Error> {
    CaseOverrides::deserialize(d).map(|o| o.apply(UmiCaseParams::olos()))
}

fn de_tx_antenna<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<AntennaPattern, D::Error> {
    AntennaOverrides::deserialize(d).map(|o| o.apply(AntennaPattern::tx_waveguide()))
}

fn de_rx_antenna<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<AntennaPattern, D::Error> {
    AntennaOverrides::deserialize(d).map(|o| o.apply(AntennaPattern::rx_horn()))
}

/// Everything a pipeline run needs. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamBundle {
    pub plan: FrequencyPlan,
    pub grid: ScanGrid,
    #[serde(deserialize_with = "de_tx_antenna")]
    pub tx_antenna: AntennaPattern,
    #[serde(deserialize_with = "de_rx_antenna")]
    pub rx_antenna: AntennaPattern,
    #[serde(deserialize_with = "de_los")]
    pub los: UmiCaseParams,
    #[serde(deserialize_with = "de_olos")]
    pub olos: UmiCaseParams,
    pub foliage: FoliageParams,
    pub sounder: SounderParams,
    pub synth: SynthParams,
    pub clustering: ClusteringParams,
    pub drift: DriftModel,
    pub roundtrip: RoundtripParams,
    pub scene: Scene,
}

impl Default for ParamBundle {
    fn default() -> Self {
        Self {
            plan: FrequencyPlan::default(),
            grid: ScanGrid::default(),
            tx_antenna: AntennaPattern::tx_waveguide(),
            rx_antenna: AntennaPattern::rx_horn(),
            los: UmiCaseParams::los(),
            olos: UmiCaseParams::olos(),
            foliage: FoliageParams::default(),
            sounder: SounderParams::default(),
            synth: SynthParams::default(),
            clustering: ClusteringParams::default(),
            drift: DriftModel::default(),
            roundtrip: RoundtripParams::default(),
            scene: Scene::default(),
        }
    }
}

impl ParamBundle {
    pub fn case(&self, case: crate::propagation::LinkCase) -> &UmiCaseParams {
        match case {
            crate::propagation::LinkCase::Los => &self.los,
            crate::propagation::LinkCase::Olos => &self.olos,
        }
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("bundle serializes to TOML")
    }

    /// Normalized JSON form, emitted next to every run for provenance.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes to JSON")
    }

    /// Every invariant violation in the bundle; empty when valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let p = &self.plan;
        if !(p.center_freq > 0.0) {
            out.push(Violation::new("plan.center_freq", "center_freq > 0"));
        }
        if !(p.bandwidth > 0.0) {
            out.push(Violation::new("plan.bandwidth", "bandwidth > 0"));
        }
        if p.n_samples < 4 {
            out.push(Violation::new("plan.n_samples", "n_samples ≥ 4"));
        }
        if p.extended_samples < p.n_samples {
            out.push(Violation::new(
                "plan.extended_samples",
                format!(
                    "extended_samples ({}) ≥ n_samples ({})",
                    p.extended_samples, p.n_samples
                ),
            ));
        }

        let g = &self.grid;
        for (name, start, stop, step) in [
            ("azimuth", g.azimuth_start, g.azimuth_stop, g.azimuth_step),
            ("elevation", g.elevation_start, g.elevation_stop, g.elevation_step),
        ] {
            if !(step > 0.0) {
                out.push(Violation::new(format!("grid.{name}_step"), "step > 0"));
                continue;
            }
            if stop < start {
                out.push(Violation::new(format!("grid.{name}_stop"), "stop ≥ start"));
                continue;
            }
            let n = (stop - start) / step;
            if (n - n.round()).abs() > 1e-9 {
                out.push(Violation::new(
                    format!("grid.{name}_step"),
                    "step must divide the range exactly",
                ));
            }
        }
        if g.elevation_start < -90.0 || g.elevation_stop > 90.0 {
            out.push(Violation::new("grid.elevation_start", "elevation within [-90, 90]"));
        }
        if g.azimuth_stop - g.azimuth_start >= 360.0 {
            out.push(Violation::new("grid.azimuth_stop", "azimuth span < 360"));
        }

        for (name, a) in [("tx_antenna", &self.tx_antenna), ("rx_antenna", &self.rx_antenna)] {
            if !(a.hpbw > 0.0) {
                out.push(Violation::new(format!("{name}.hpbw"), "hpbw > 0"));
            }
            if !(a.sidelobe_floor < 0.0) {
                out.push(Violation::new(format!("{name}.sidelobe_floor"), "sidelobe_floor < 0"));
            }
        }

        self.los.check("los", &mut out);
        self.olos.check("olos", &mut out);

        let fo = &self.foliage;
        let [lo, hi] = fo.clamp_range;
        if !(lo <= hi) {
            out.push(Violation::new("foliage.clamp_range", "clamp_range ordered"));
        } else if !(fo.loss_mean >= lo && fo.loss_mean <= hi) {
            out.push(Violation::new("foliage.loss_mean", "loss_mean inside clamp_range"));
        }
        if !(fo.loss_sigma >= 0.0) {
            out.push(Violation::new("foliage.loss_sigma", "loss_sigma ≥ 0"));
        }

        let s = &self.sounder;
        if !(s.pdp_clip_value < s.noise_floor) {
            out.push(Violation::new("sounder.pdp_clip_value", "pdp_clip_value < noise_floor"));
        }
        if !(s.dynamic_range_r > 0.0) {
            out.push(Violation::new("sounder.dynamic_range_r", "dynamic_range_r > 0"));
        }
        if s.averaging_count == 0 {
            out.push(Violation::new("sounder.averaging_count", "averaging_count ≥ 1"));
        }
        if !(s.dwell_time > 0.0) {
            out.push(Violation::new("sounder.dwell_time", "dwell_time > 0"));
        }
        if !(s.noise_margin >= 0.0) {
            out.push(Violation::new("sounder.noise_margin", "noise_margin ≥ 0"));
        }

        if self.synth.rays_per_cluster == 0 {
            out.push(Violation::new("synth.rays_per_cluster", "rays_per_cluster ≥ 1"));
        }
        if !(self.synth.backscatter_penalty >= 0.0) {
            out.push(Violation::new("synth.backscatter_penalty", "backscatter_penalty ≥ 0"));
        }
        if !(self.synth.delay_ratio > 1.0) {
            out.push(Violation::new("synth.delay_ratio", "delay_ratio > 1"));
        }
        if !(self.synth.cluster_shadowing >= 0.0) {
            out.push(Violation::new("synth.cluster_shadowing", "cluster_shadowing ≥ 0"));
        }

        let c = &self.clustering;
        if !(c.eps > 0.0) {
            out.push(Violation::new("clustering.eps", "eps > 0"));
        }
        if c.min_pts == 0 {
            out.push(Violation::new("clustering.min_pts", "min_pts ≥ 1"));
        }
        if !(c.delay_weight >= 0.0) {
            out.push(Violation::new("clustering.delay_weight", "delay_weight ≥ 0"));
        }

        if !(self.drift.slope.abs() < 1e-6) {
            out.push(Violation::new("drift.slope", "|slope| < 1e-6"));
        }

        let r = &self.roundtrip;
        if !(r.min_distance >= 1.0 && r.max_distance > r.min_distance) {
            out.push(Violation::new(
                "roundtrip.min_distance",
                "1 ≤ min_distance < max_distance",
            ));
        }
        if r.estimator_dynamic_range.is_some_and(|x| !(x >= 0.0)) {
            out.push(Violation::new("roundtrip.estimator_dynamic_range", "≥ 0"));
        }

        self.scene.check(&mut out);
        out
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Reads, applies defaults to, and validates a TOML configuration file.
pub fn load_config(path: &Path) -> Result<ParamBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bundle = ParamBundle::from_toml_str(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })?;
    bundle.validated()
}
