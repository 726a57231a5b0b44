//! PDPs and multipath extraction from direction scans.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{AntennaPattern, ParamBundle, ScanGrid, SounderParams};
use crate::sounder::{antenna_gain, angular_offset, matched_amplitude, refine_delay, DssScan, Pulse};
use crate::synth::{Mpc, MpcOrigin, MpcSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdpKind {
    Directional,
    Omni,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pdp {
    /// seconds
    pub delays: Vec<f64>,
    /// dB per bin
    pub power: Vec<f64>,
    pub kind: PdpKind,
}

impl Pdp {
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.power
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn delay_axis(scan: &DssScan) -> Vec<f64> {
    let bin = scan.plan.delay_resolution();
    (0..scan.samples_per_cir).map(|i| i as f64 * bin).collect()
}

/// `10·log10|s|²` of one direction, floored at the clip value.
pub fn directional_pdp(scan: &DssScan, direction: usize, sounder: &SounderParams) -> Result<Pdp> {
    if direction >= scan.n_directions() {
        let (az, el) = scan.grid.direction(direction.min(scan.grid.len().saturating_sub(1)));
        return Err(Error::UnknownDirection { az, el });
    }
    Ok(Pdp {
        delays: delay_axis(scan),
        power: scan
            .cir(direction)
            .iter()
            .map(|c| (10.0 * (c.norm_sqr() as f64).log10()).max(sounder.pdp_clip_value))
            .collect(),
        kind: PdpKind::Directional,
    })
}

/// Replaces bins below the noise floor by the clip value.
pub fn eliminate_noise(pdp: &Pdp, sounder: &SounderParams) -> Pdp {
    Pdp {
        power: pdp
            .power
            .iter()
            .map(|&p| if p < sounder.noise_floor { sounder.pdp_clip_value } else { p })
            .collect(),
        ..pdp.clone()
    }
}

/// Noise-eliminated directional PDPs summed in linear power.
pub fn omni_pdp(scan: &DssScan, sounder: &SounderParams) -> Pdp {
    let mut lin = vec![0.0; scan.samples_per_cir];
    for d in 0..scan.n_directions() {
        for (acc, c) in lin.iter_mut().zip(scan.cir(d)) {
            let p = 10.0 * (c.norm_sqr() as f64).log10();
            let p = if p < sounder.noise_floor { sounder.pdp_clip_value } else { p };
            *acc += 10f64.powf(p / 10.0);
        }
    }
    Pdp {
        delays: delay_axis(scan),
        power: lin.iter().map(|p| 10.0 * p.log10()).collect(),
        kind: PdpKind::Omni,
    }
}

pub fn write_pdp_csv<W: Write>(mut w: W, pdp: &Pdp) -> std::io::Result<()> {
    writeln!(w, "delay_s,power_db")?;
    for (t, p) in pdp.delays.iter().zip(&pdp.power) {
        writeln!(w, "{t},{p}")?;
    }
    Ok(())
}

/// Path-gain threshold `10^(max(α1 − R, NF + 5)/20)` as a linear amplitude.
pub fn mpc_threshold(strongest_gain_db: f64, sounder: &SounderParams) -> f64 {
    let db = (strongest_gain_db - sounder.dynamic_range_r).max(sounder.noise_floor + 5.0);
    10f64.powf(db / 20.0)
}

/// Detection margin below the strongest raw sample, on top of R.
const DETECTION_HEADROOM: f64 = 25.0;
const MAX_PATHS: usize = 400;
const SUBTRACT_SPAN: i64 = 64;
const GOLDEN_ITERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimatorOptions {
    /// Unwrap delays into `[min_delay, min_delay + max_delay)`.
    pub min_delay: Option<f64>,
    /// Re-estimation sweeps after successive cancellation.
    pub sweeps: usize,
}

impl EstimatorOptions {
    pub fn new() -> Self {
        Self {
            min_delay: None,
            sweeps: 2,
        }
    }
}

/// A fitted path: delay in bins, arrival angles, and the complex amplitude
/// a boresight steering would see.
#[derive(Debug, Clone, Copy)]
struct Path {
    x: f64,
    az: f64,
    el: f64,
    amp: Complex64,
}

fn golden(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

struct Fitter<'a> {
    grid: &'a ScanGrid,
    dirs: Vec<(f64, f64)>,
    pulse: &'a Pulse,
    rx: &'a AntennaPattern,
}

impl Fitter<'_> {
    /// Amplitude pattern of steering `d` toward a path, relative to boresight.
    fn weight(&self, d: usize, az: f64, el: f64) -> f64 {
        let (saz, sel) = self.dirs[d];
        let g = antenna_gain(self.rx, angular_offset(saz, sel, az, el)) - self.rx.boresight_gain;
        10f64.powf(g / 20.0)
    }

    /// Steerings within one grid step of the one nearest to `(az, el)`.
    fn neighbourhood(&self, az: f64, el: f64) -> Vec<usize> {
        let g = self.grid;
        let (n_az, n_el) = (g.n_azimuth() as i64, g.n_elevation() as i64);
        let ai = ((az - g.azimuth_start) / g.azimuth_step).round() as i64;
        let ei = (((el - g.elevation_start) / g.elevation_step).round() as i64).clamp(0, n_el - 1);
        let mut out = Vec::with_capacity(9);
        for da in -1..=1 {
            let a = ai + da;
            let a = if g.azimuth_wraps() {
                a.rem_euclid(n_az)
            } else if (0..n_az).contains(&a) {
                a
            } else {
                continue;
            };
            for de in -1..=1 {
                let e = ei + de;
                if (0..n_el).contains(&e) {
                    let d = g.index(a as usize, e as usize);
                    if !out.contains(&d) {
                        out.push(d);
                    }
                }
            }
        }
        out
    }

    /// Joint delay/angle fit of a single path to the residual around an
    /// initial guess. `x_span` bounds the delay search, `a_span` the angle
    /// search (degrees of great circle).
    fn fit(&self, res: &[Vec<Complex64>], init: Path, x_span: f64, a_span: f64) -> Path {
        let mut p = init;
        let (mut xs, mut s) = (x_span, a_span);
        for _ in 0..3 {
            let nb = self.neighbourhood(p.az, p.el);
            let w: Vec<f64> = nb.iter().map(|&d| self.weight(d, p.az, p.el)).collect();
            p.x = golden(p.x - xs, p.x + xs, |x| {
                nb.iter()
                    .zip(&w)
                    .map(|(&d, g)| matched_amplitude(&res[d], self.pulse, x) * g)
                    .sum::<Complex64>()
                    .norm_sqr()
            });
            let nb = self.neighbourhood(p.az, p.el);
            let z: Vec<Complex64> = nb.iter().map(|&d| matched_amplitude(&res[d], self.pulse, p.x)).collect();
            let score = |az: f64, el: f64| {
                let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
                for (&d, zi) in nb.iter().zip(&z) {
                    let g = self.weight(d, az, el);
                    num += zi * g;
                    den += g * g;
                }
                num.norm_sqr() / den
            };
            let cos_el = p.el.to_radians().cos().max(0.05);
            p.az = golden(p.az - s / cos_el, p.az + s / cos_el, |a| score(a, p.el)).rem_euclid(360.0);
            p.el = golden((p.el - s).max(-90.0), (p.el + s).min(90.0), |e| score(p.az, e));
            xs *= 0.5;
            s *= 0.5;
        }
        let nb = self.neighbourhood(p.az, p.el);
        let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
        for &d in &nb {
            let g = self.weight(d, p.az, p.el);
            num += matched_amplitude(&res[d], self.pulse, p.x) * g;
            den += g * g;
        }
        p.amp = num / den;
        p
    }

    /// Adds (`sign` = −1) or removes (`sign` = 1) a path from every steering.
    fn subtract(&self, res: &mut [Vec<Complex64>], p: &Path, sign: f64) {
        let c = p.x.round() as i64;
        let taps: Vec<(usize, Complex64)> = (c - SUBTRACT_SPAN..=c + SUBTRACT_SPAN)
            .map(|m| {
                let n = res[0].len() as i64;
                (m.rem_euclid(n) as usize, p.amp * self.pulse.at(m as f64 - p.x) * sign)
            })
            .collect();
        res.par_iter_mut().enumerate().for_each(|(d, r)| {
            let g = self.weight(d, p.az, p.el);
            for &(k, v) in &taps {
                r[k] -= v * g;
            }
        });
    }
}

fn global_peak(res: &[Vec<Complex64>]) -> (usize, usize, f64) {
    res.par_iter()
        .enumerate()
        .map(|(d, r)| {
            let (k, p) = r
                .iter()
                .enumerate()
                .map(|(k, c)| (k, c.norm_sqr()))
                .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
            (d, k, p)
        })
        .reduce(|| (0, 0, 0.0), |a, b| if b.2 > a.2 || (b.2 == a.2 && b.0 < a.0) { b } else { a })
}

/// Extracts multipath components from a calibrated, drift-corrected scan.
///
/// Successive cancellation over the whole scan: the strongest residual
/// sample seeds a path, whose delay and arrival angles are fitted jointly
/// to the matched-filter outputs of the surrounding steerings under the
/// horn pattern. The fitted path is removed from every steering, side lobes
/// included, until the residual drops below
/// `max(NF + 5, strongest − R − 12)` dB. A few re-estimation sweeps follow.
/// Gains are de-embedded by the Tx gain and the Rx boresight gain, then
/// thresholded against the strongest path.
pub fn extract_mpcs(scan: &DssScan, params: &ParamBundle, pulse: &Pulse, opts: &EstimatorOptions) -> Result<MpcSet> {
    let n_dir = scan.n_directions();
    if n_dir == 0 || scan.samples.is_empty() {
        return Err(Error::Empty("scan"));
    }
    if n_dir != scan.grid.len() {
        return Err(Error::Domain(format!(
            "scan holds {n_dir} directions, grid has {}",
            scan.grid.len()
        )));
    }
    if pulse.len() != scan.plan.n_samples {
        return Err(Error::Domain("pulse length does not match the frequency plan".into()));
    }
    let sounder = &params.sounder;
    let rx = &params.rx_antenna;
    let fitter = Fitter {
        grid: &scan.grid,
        dirs: (0..n_dir).map(|d| scan.grid.direction(d)).collect(),
        pulse,
        rx,
    };

    let mut res: Vec<Vec<Complex64>> = (0..n_dir).into_par_iter().map(|d| scan.cir64(d)).collect();
    let (_, _, raw_max) = global_peak(&res);
    if !(raw_max > 0.0) {
        return Ok(MpcSet {
            link: scan.link,
            mpcs: Vec::new(),
        });
    }
    let stop_db = (sounder.noise_floor + 5.0)
        .max(10.0 * raw_max.log10() - sounder.dynamic_range_r - DETECTION_HEADROOM);
    let stop_power = 10f64.powf(stop_db / 10.0);
    let step = scan.grid.azimuth_step.max(scan.grid.elevation_step);

    let mut paths: Vec<Path> = Vec::new();
    while paths.len() < MAX_PATHS {
        let (d, k, p) = global_peak(&res);
        if !(p >= stop_power) {
            break;
        }
        let (az, el) = fitter.dirs[d];
        let (x, _) = refine_delay(&res[d], pulse, k as f64, 1.0);
        let init = Path {
            x,
            az,
            el,
            amp: Complex64::new(0.0, 0.0),
        };
        let path = fitter.fit(&res, init, 0.5, step);
        fitter.subtract(&mut res, &path, 1.0);
        if res[d][k].norm_sqr() >= p {
            break;
        }
        paths.push(path);
    }
    for _ in 0..opts.sweeps {
        for path in paths.iter_mut() {
            fitter.subtract(&mut res, path, -1.0);
            *path = fitter.fit(&res, *path, 0.5, step / 2.0);
            fitter.subtract(&mut res, path, 1.0);
        }
    }

    let bin = scan.plan.delay_resolution();
    let g_tx = antenna_gain(&params.tx_antenna, 0.0);
    let period = scan.plan.max_delay();
    let mut mpcs: Vec<Mpc> = paths
        .iter()
        .filter(|p| p.amp.norm_sqr() > 0.0)
        .map(|p| {
            let t0 = opts.min_delay.unwrap_or(0.0);
            Mpc {
                delay: t0 + (p.x * bin - t0).rem_euclid(period),
                gain_db: 10.0 * p.amp.norm_sqr().log10() - g_tx - rx.boresight_gain,
                azimuth: p.az,
                elevation: p.el,
                cluster_id: None,
                origin: MpcOrigin::Estimated,
            }
        })
        .collect();
    if let Some(strongest) = mpcs.iter().map(|m| m.gain_db).reduce(f64::max) {
        let thr_db = 20.0 * mpc_threshold(strongest, sounder).log10();
        mpcs.retain(|m| m.gain_db >= thr_db);
    }
    mpcs.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    Ok(MpcSet {
        link: scan.link,
        mpcs,
    })
}
