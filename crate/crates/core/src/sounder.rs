//! Direction-scan sounder simulation and CIR post-processing.
//!
//! A scan holds one complex CIR per steering direction of the grid, taken
//! in azimuth-major order one dwell apart. CIRs are built in the frequency
//! domain from a band-limited pulse, so delays wrap modulo the unambiguous
//! range exactly as a periodic sounding sequence would.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::params::{AntennaKind, AntennaPattern, DriftModel, FrequencyPlan, ParamBundle, ScanGrid};
use crate::propagation::{LinkCase, LinkState};
use crate::synth::{LinkInfo, MpcSet};

/// Gain (dBi) of an antenna at an angular offset from boresight.
pub fn antenna_gain(p: &AntennaPattern, offset_deg: f64) -> f64 {
    match p.kind {
        AntennaKind::Waveguide => p.boresight_gain,
        AntennaKind::Horn => {
            let main = p.boresight_gain - 12.0 * (offset_deg / p.hpbw).powi(2);
            main.max(p.boresight_gain + p.sidelobe_floor)
        }
    }
}

/// Great-circle angle between two directions, degrees.
pub fn angular_offset(az1: f64, el1: f64, az2: f64, el2: f64) -> f64 {
    let (a1, e1, a2, e2) = (az1.to_radians(), el1.to_radians(), az2.to_radians(), el2.to_radians());
    let c = e1.sin() * e2.sin() + e1.cos() * e2.cos() * (a1 - a2).cos();
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

const TUKEY_ROLLOFF: f64 = 0.1;
const TABLE_OVERSAMPLE: usize = 64;
/// Half-width of the tabulated pulse, bins.
pub const PULSE_HALF_WIDTH: usize = 64;

/// Band-limited sounding pulse.
///
/// The spectrum is a Tukey window across the band, scaled so that an on-grid
/// path of unit amplitude produces a unit CIR sample. The time-domain pulse
/// is tabulated on a fine grid for fractional-delay evaluation.
#[derive(Debug, Clone)]
pub struct Pulse {
    n: usize,
    spectrum: Vec<f64>,
    table: Vec<Complex64>,
    energy: f64,
}

fn signed_bin(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

impl Pulse {
    pub fn new(n: usize) -> Self {
        let tukey = |x: f64| {
            let a = TUKEY_ROLLOFF;
            if x < a / 2.0 {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * x / a).cos())
            } else if x > 1.0 - a / 2.0 {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * (1.0 - x) / a).cos())
            } else {
                1.0
            }
        };
        let raw: Vec<f64> = (0..n)
            .map(|k| {
                let j = signed_bin(k, n) + (n / 2) as f64;
                tukey((j + 0.5) / n as f64)
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let spectrum: Vec<f64> = raw.iter().map(|w| w / mean).collect();
        let energy = spectrum.iter().map(|w| w * w).sum::<f64>() / n as f64;

        let half = PULSE_HALF_WIDTH.min(n / 2);
        let len = 2 * half * TABLE_OVERSAMPLE + 1;
        let table = (0..len)
            .into_par_iter()
            .map(|i| {
                let x = (i as f64 - (half * TABLE_OVERSAMPLE) as f64) / TABLE_OVERSAMPLE as f64;
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, w) in spectrum.iter().enumerate() {
                    let ph = 2.0 * std::f64::consts::PI * signed_bin(k, n) * x / n as f64;
                    acc += Complex64::from_polar(*w, ph);
                }
                acc / n as f64
            })
            .collect();
        Pulse {
            n,
            spectrum,
            table,
            energy,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Real spectral weights in FFT bin order.
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Σ|p[m]|² over one period: mean(W²)/mean(W)².
    pub fn energy(&self) -> f64 {
        self.energy
    }

    fn half(&self) -> usize {
        (self.table.len() - 1) / (2 * TABLE_OVERSAMPLE)
    }

    /// Pulse value `x` bins after its peak (zero beyond the tabulated span).
    pub fn at(&self, x: f64) -> Complex64 {
        let half = self.half() as f64;
        if !(x.abs() < half) {
            return Complex64::new(0.0, 0.0);
        }
        let pos = (x + half) * TABLE_OVERSAMPLE as f64;
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if i + 1 >= self.table.len() {
            return self.table[self.table.len() - 1];
        }
        self.table[i] * (1.0 - f) + self.table[i + 1] * f
    }
}

/// One direction scan: a CIR per grid direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DssScan {
    pub plan: FrequencyPlan,
    pub grid: ScanGrid,
    /// n_samples, or extended_samples after de-aliasing
    pub samples_per_cir: usize,
    /// capture time of each direction, seconds
    pub timestamps: Vec<f64>,
    /// direction-major CIR samples
    pub samples: Vec<Complex32>,
    pub link: Option<LinkInfo>,
}

impl DssScan {
    pub fn n_directions(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_extended(&self) -> bool {
        self.samples_per_cir != self.plan.n_samples
    }

    pub fn cir(&self, dir: usize) -> &[Complex32] {
        let n = self.samples_per_cir;
        &self.samples[dir * n..(dir + 1) * n]
    }

    pub fn cir_mut(&mut self, dir: usize) -> &mut [Complex32] {
        let n = self.samples_per_cir;
        &mut self.samples[dir * n..(dir + 1) * n]
    }

    pub fn direction_index(&self, az: f64, el: f64) -> Result<usize> {
        self.grid.find(az, el).ok_or(Error::UnknownDirection { az, el })
    }

    /// Samples of one direction in time order as f64 (first period only).
    pub fn cir64(&self, dir: usize) -> Vec<Complex64> {
        self.cir(dir)[..self.plan.n_samples]
            .iter()
            .map(|c| Complex64::new(c.re as f64, c.im as f64))
            .collect()
    }
}

fn ffts(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

/// `W_k·e^{−j2π f_k τ}` in FFT bin order, with τ in bins.
fn delayed_spectrum(pulse: &Pulse, x: f64) -> Vec<Complex64> {
    let n = pulse.len();
    pulse
        .spectrum
        .iter()
        .enumerate()
        .map(|(k, w)| Complex64::from_polar(*w, -2.0 * std::f64::consts::PI * signed_bin(k, n) * x / n as f64))
        .collect()
}

/// Simulates a direction scan of one multipath set.
///
/// Each path is weighted by the Tx gain and the Rx horn gain at its offset
/// from the steering direction and carries the carrier phase of its delay.
/// Direction `i` is captured at `i·dwell_time`, so the configured trigger
/// drift shifts later directions further. Complex Gaussian noise of power
/// `noise_floor − noise_margin` is added when enabled.
pub fn simulate_scan<R: Rng + ?Sized>(set: &MpcSet, params: &ParamBundle, rng: &mut R) -> Result<DssScan> {
    simulate_with_pulse(set, params, &Pulse::new(params.plan.n_samples), rng)
}

pub fn simulate_with_pulse<R: Rng + ?Sized>(
    set: &MpcSet,
    params: &ParamBundle,
    pulse: &Pulse,
    rng: &mut R,
) -> Result<DssScan> {
    let plan = params.plan;
    let grid = params.grid;
    let n = plan.n_samples;
    if pulse.len() != n {
        return Err(Error::Domain("pulse length does not match the frequency plan".into()));
    }
    let bin = plan.delay_resolution();
    let g_tx = antenna_gain(&params.tx_antenna, 0.0);
    let timestamps: Vec<f64> = (0..grid.len())
        .map(|i| i as f64 * params.sounder.dwell_time)
        .collect();
    let (_, inverse) = ffts(n);

    let path_spectra: Vec<Vec<Complex64>> = set
        .mpcs
        .par_iter()
        .map(|m| delayed_spectrum(pulse, m.delay / bin))
        .collect();
    let carriers: Vec<Complex64> = set
        .mpcs
        .iter()
        .map(|m| {
            let ph = -2.0 * std::f64::consts::PI * (plan.center_freq * m.delay).fract();
            Complex64::from_polar(1.0, ph)
        })
        .collect();
    let unit = Pulse {
        spectrum: vec![1.0; n],
        ..pulse.clone()
    };

    let cirs: Vec<Vec<Complex32>> = (0..grid.len())
        .into_par_iter()
        .map(|d| {
            let (az, el) = grid.direction(d);
            let mut spec = vec![Complex64::new(0.0, 0.0); n];
            for ((m, sp), carrier) in set.mpcs.iter().zip(&path_spectra).zip(&carriers) {
                let off = angular_offset(az, el, m.azimuth, m.elevation);
                let g_db = m.gain_db + g_tx + antenna_gain(&params.rx_antenna, off);
                let c = carrier * 10f64.powf(g_db / 20.0);
                for (s, v) in spec.iter_mut().zip(sp) {
                    *s += c * v;
                }
            }
            let drift = params.drift.offset_at(timestamps[d]);
            if drift != 0.0 {
                for (s, r) in spec.iter_mut().zip(delayed_spectrum(&unit, drift / bin)) {
                    *s *= r;
                }
            }
            inverse.process(&mut spec);
            spec.iter()
                .map(|c| {
                    let v = c / n as f64;
                    Complex32::new(v.re as f32, v.im as f32)
                })
                .collect()
        })
        .collect();
    let mut samples: Vec<Complex32> = cirs.into_iter().flatten().collect();

    if params.sounder.add_noise {
        let sigma = (10f64.powf(params.sounder.noise_power_db() / 10.0) / 2.0).sqrt();
        for s in &mut samples {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *s += Complex32::new((sigma * re) as f32, (sigma * im) as f32);
        }
    }
    Ok(DssScan {
        plan,
        grid,
        samples_per_cir: n,
        timestamps,
        samples,
        link: set.link,
    })
}

fn map_spectra(scan: &DssScan, f: impl Fn(&mut [Complex64], usize) + Sync) -> Result<DssScan> {
    if scan.is_extended() {
        return Err(Error::AlreadyExtended(scan.samples_per_cir));
    }
    let n = scan.plan.n_samples;
    let (forward, inverse) = ffts(n);
    let mut out = scan.clone();
    out.samples
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(d, chunk)| {
            let mut spec: Vec<Complex64> = chunk
                .iter()
                .map(|c| Complex64::new(c.re as f64, c.im as f64))
                .collect();
            forward.process(&mut spec);
            f(&mut spec, d);
            inverse.process(&mut spec);
            for (o, v) in chunk.iter_mut().zip(&spec) {
                let v = v / n as f64;
                *o = Complex32::new(v.re as f32, v.im as f32);
            }
        });
    Ok(out)
}

fn check_response(scan: &DssScan, response: &[Complex64]) -> Result<()> {
    if response.len() != scan.plan.n_samples {
        return Err(Error::ResponseLength {
            expected: scan.plan.n_samples,
            got: response.len(),
        });
    }
    Ok(())
}

/// Multiplies every CIR spectrum by a system frequency response.
pub fn apply_system_response(scan: &DssScan, response: &[Complex64]) -> Result<DssScan> {
    check_response(scan, response)?;
    map_spectra(scan, |spec, _| {
        for (s, h) in spec.iter_mut().zip(response) {
            *s *= h;
        }
    })
}

/// Divides every CIR spectrum by the back-to-back system response.
/// An all-ones response returns the scan unchanged.
pub fn apply_calibration(scan: &DssScan, response: &[Complex64]) -> Result<DssScan> {
    check_response(scan, response)?;
    if let Some(bin) = response.iter().position(|h| !(h.norm() > 1e-12)) {
        return Err(Error::SingularResponse { bin });
    }
    if response.iter().all(|h| *h == Complex64::new(1.0, 0.0)) {
        return Ok(scan.clone());
    }
    map_spectra(scan, |spec, _| {
        for (s, h) in spec.iter_mut().zip(response) {
            *s /= h;
        }
    })
}

/// Complex amplitude of a pulse at fractional delay `x` (bins) in a CIR.
pub fn matched_amplitude(cir: &[Complex64], pulse: &Pulse, x: f64) -> Complex64 {
    const SPAN: i64 = 16;
    let n = cir.len() as i64;
    let c = x.round() as i64;
    let mut acc = Complex64::new(0.0, 0.0);
    let mut energy = 0.0;
    for m in c - SPAN..=c + SPAN {
        let p = pulse.at(m as f64 - x);
        acc += cir[m.rem_euclid(n) as usize] * p.conj();
        energy += p.norm_sqr();
    }
    acc / energy
}

/// Fractional delay (bins) maximising the matched-filter output around bin
/// `k`, searched over `[k − half_span, k + half_span]`.
pub fn refine_delay(cir: &[Complex64], pulse: &Pulse, k: f64, half_span: f64) -> (f64, Complex64) {
    let f = |x: f64| matched_amplitude(cir, pulse, x).norm_sqr();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (k - half_span, k + half_span);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..40 {
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
    let x = 0.5 * (a + b);
    (x, matched_amplitude(cir, pulse, x))
}

/// A direction whose strongest path has a known delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftAnchor {
    pub direction: usize,
    /// seconds
    pub true_delay: f64,
}

/// Estimates a linear trigger drift from anchor directions and removes it.
///
/// The strongest peak of each anchor CIR is located to sub-bin accuracy;
/// its offset from the known delay (wrapped into half the unambiguous
/// range) is fitted as `a + b·t` over the anchor capture times. Every CIR is
/// then shifted back by the fitted offset at its own capture time.
pub fn correct_drift(scan: &DssScan, anchors: &[DriftAnchor], pulse: &Pulse) -> Result<(DssScan, DriftModel)> {
    if anchors.len() < 2 {
        return Err(Error::Drift(format!("need at least 2 anchors (got {})", anchors.len())));
    }
    let bin = scan.plan.delay_resolution();
    let period = scan.plan.max_delay();
    let mut pts = Vec::with_capacity(anchors.len());
    for a in anchors {
        if a.direction >= scan.n_directions() {
            return Err(Error::Drift(format!("anchor direction {} out of range", a.direction)));
        }
        let cir = scan.cir64(a.direction);
        let k = cir
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.norm_sqr().total_cmp(&y.1.norm_sqr()))
            .map(|(i, _)| i)
            .ok_or(Error::Empty("scan"))?;
        let (x, _) = refine_delay(&cir, pulse, k as f64, 1.0);
        let off = (x * bin - a.true_delay + period / 2.0).rem_euclid(period) - period / 2.0;
        pts.push((scan.timestamps[a.direction], off));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let om = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if !(stt > 0.0) {
        return Err(Error::Drift("anchor timestamps are all identical".into()));
    }
    let slope = pts.iter().map(|p| (p.0 - tm) * (p.1 - om)).sum::<f64>() / stt;
    let model = DriftModel {
        offset_at_t0: om - slope * tm,
        slope,
    };
    let size = scan.plan.n_samples;
    let corrected = map_spectra(scan, |spec, d| {
        let x = model.offset_at(scan.timestamps[d]) / bin;
        for (k, s) in spec.iter_mut().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * signed_bin(k, size) * x / size as f64;
            *s *= Complex64::from_polar(1.0, ph);
        }
    })?;
    Ok((corrected, model))
}

/// Extends each CIR by repeating its first `extended − n` samples, so paths
/// that wrapped past the unambiguous range reappear at their true delay.
pub fn dealias_extend(scan: &DssScan) -> Result<DssScan> {
    if scan.is_extended() {
        return Err(Error::AlreadyExtended(scan.samples_per_cir));
    }
    let n = scan.plan.n_samples;
    let ext = scan.plan.extended_samples;
    let mut samples = Vec::with_capacity(scan.n_directions() * ext);
    for d in 0..scan.n_directions() {
        let c = scan.cir(d);
        samples.extend_from_slice(c);
        samples.extend_from_slice(&c[..ext - n]);
    }
    Ok(DssScan {
        samples_per_cir: ext,
        samples,
        ..scan.clone()
    })
}

const MAGIC: &[u8; 8] = b"DSSCAN01";
const VERSION: u32 = 1;

/// Binary scan container, little-endian.
pub fn write_scan<W: Write>(mut w: W, scan: &DssScan) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let p = &scan.plan;
    w.write_f64::<LittleEndian>(p.center_freq)?;
    w.write_f64::<LittleEndian>(p.bandwidth)?;
    w.write_u64::<LittleEndian>(p.n_samples as u64)?;
    w.write_u64::<LittleEndian>(p.extended_samples as u64)?;
    let g = &scan.grid;
    for v in [
        g.azimuth_start,
        g.azimuth_stop,
        g.azimuth_step,
        g.elevation_start,
        g.elevation_stop,
        g.elevation_step,
    ] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u64::<LittleEndian>(scan.samples_per_cir as u64)?;
    w.write_u64::<LittleEndian>(scan.n_directions() as u64)?;
    match &scan.link {
        None => w.write_u8(0)?,
        Some(l) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(l.rx_index as u64)?;
            w.write_f64::<LittleEndian>(l.distance)?;
            w.write_u8(matches!(l.state.case, LinkCase::Olos) as u8)?;
            w.write_f64::<LittleEndian>(l.state.foliage_loss)?;
        }
    }
    for t in &scan.timestamps {
        w.write_f64::<LittleEndian>(*t)?;
    }
    for s in &scan.samples {
        w.write_f32::<LittleEndian>(s.re)?;
        w.write_f32::<LittleEndian>(s.im)?;
    }
    Ok(())
}

pub fn read_scan<R: Read>(mut r: R, path: &Path) -> Result<DssScan> {
    let io = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::schema(path, "truncated scan file")
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::schema(path, "not a scan file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::schema(path, format!("unsupported version {version}")));
    }
    let f = |r: &mut R| r.read_f64::<LittleEndian>().map_err(io);
    let plan = FrequencyPlan {
        center_freq: f(&mut r)?,
        bandwidth: f(&mut r)?,
        n_samples: r.read_u64::<LittleEndian>().map_err(io)? as usize,
        extended_samples: r.read_u64::<LittleEndian>().map_err(io)? as usize,
    };
    let grid = ScanGrid {
        azimuth_start: f(&mut r)?,
        azimuth_stop: f(&mut r)?,
        azimuth_step: f(&mut r)?,
        elevation_start: f(&mut r)?,
        elevation_stop: f(&mut r)?,
        elevation_step: f(&mut r)?,
    };
    let per = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let n_dir = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    if per != plan.n_samples && per != plan.extended_samples {
        return Err(Error::schema(path, format!("bad samples per CIR {per}")));
    }
    if n_dir != grid.len() {
        return Err(Error::schema(path, format!("{n_dir} directions, grid has {}", grid.len())));
    }
    let link = match r.read_u8().map_err(io)? {
        0 => None,
        1 => {
            let rx_index = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let distance = f(&mut r)?;
            let case = if r.read_u8().map_err(io)? == 1 {
                LinkCase::Olos
            } else {
                LinkCase::Los
            };
            Some(LinkInfo {
                rx_index,
                distance,
                state: LinkState {
                    case,
                    foliage_loss: f(&mut r)?,
                },
            })
        }
        x => return Err(Error::schema(path, format!("bad link flag {x}"))),
    };
    let timestamps = (0..n_dir).map(|_| f(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(n_dir * per);
    for _ in 0..n_dir * per {
        let re = r.read_f32::<LittleEndian>().map_err(io)?;
        let im = r.read_f32::<LittleEndian>().map_err(io)?;
        samples.push(Complex32::new(re, im));
    }
    Ok(DssScan {
        plan,
        grid,
        samples_per_cir: per,
        timestamps,
        samples,
        link,
    })
}

pub fn save_scan(path: &Path, scan: &DssScan) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_scan(&mut w, scan).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scan(path: &Path) -> Result<DssScan> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scan(std::io::BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::SPEED_OF_LIGHT;
    use crate::synth::{Mpc, MpcOrigin};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn pulse() -> &'static Pulse {
        static P: OnceLock<Pulse> = OnceLock::new();
        P.get_or_init(|| Pulse::new(2048))
    }

    fn quiet() -> ParamBundle {
        let mut p = ParamBundle::default();
        p.sounder.add_noise = false;
        p
    }

    fn path(delay: f64, gain_db: f64, az: f64, el: f64) -> Mpc {
        Mpc {
            delay,
            gain_db,
            azimuth: az,
            elevation: el,
            cluster_id: None,
            origin: MpcOrigin::Stochastic,
        }
    }

    fn scan_of(mpcs: Vec<Mpc>, p: &ParamBundle) -> DssScan {
        let set = MpcSet { link: None, mpcs };
        simulate_with_pulse(&set, p, pulse(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn peak(cir: &[Complex32]) -> (usize, f64) {
        cir.iter()
            .enumerate()
            .map(|(i, c)| (i, 10.0 * (c.norm_sqr() as f64).log10()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    #[test]
    fn horn_pattern() {
        let h = AntennaPattern::rx_horn();
        assert_eq!(antenna_gain(&h, 0.0), 26.0);
        assert!((antenna_gain(&h, 4.0) - 23.0).abs() < 1e-12);
        assert_eq!(antenna_gain(&h, 90.0), -4.0);
        assert_eq!(antenna_gain(&AntennaPattern::tx_waveguide(), 70.0), 7.0);
    }

    #[test]
    fn pulse_shape() {
        let p = pulse();
        assert!((p.at(0.0).re - 1.0).abs() < 1e-12);
        assert!((1..10).all(|m| p.at(m as f64).norm() < 0.06));
        assert!((20..64).all(|m| p.at(m as f64).norm() < 2e-3));
        assert!((50..64).all(|m| p.at(m as f64).norm() < 2e-4));
        assert!((p.energy() - 1.039).abs() < 0.01, "{}", p.energy());
    }

    #[test]
    fn boresight_path_level() {
        let p = quiet();
        let bin = p.plan.delay_resolution();
        let s = scan_of(vec![path(300.0 * bin, -100.0, 0.0, 0.0)], &p);
        let d = s.direction_index(0.0, 0.0).unwrap();
        let (k, db) = peak(s.cir(d));
        assert_eq!(k, 300);
        assert!((db - (-67.0)).abs() < 1e-4, "{db}");
        let energy: f64 = s.cir(d).iter().map(|c| c.norm_sqr() as f64).sum();
        assert!((energy / 10f64.powf(-6.7) / pulse().energy() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn wrap_and_dealias() {
        let p = quiet();
        let bin = p.plan.delay_resolution();
        let tau = 410.0 / SPEED_OF_LIGHT;
        let s = scan_of(vec![path(tau, -110.0, 0.0, 0.0)], &p);
        let d = s.direction_index(0.0, 0.0).unwrap();
        let (k, _) = peak(s.cir(d));
        assert!((k as f64 * bin * 1e9 - 34.0).abs() < 1.0, "{}", k as f64 * bin * 1e9);
        let e = dealias_extend(&s).unwrap();
        assert_eq!(e.cir(d).len(), 2154);
        let tail = &e.cir(d)[106..];
        let (k2, _) = peak(tail);
        let got = (k2 + 106) as f64 * bin;
        assert!((got - tau).abs() <= bin / 2.0, "{got}");
        assert!((got * 1e9 - 1366.7).abs() < 1.5);
        assert!(matches!(dealias_extend(&e), Err(Error::AlreadyExtended(2154))));
    }

    #[test]
    fn calibration() {
        let p = quiet();
        let s = scan_of(vec![path(1e-7, -90.0, 30.0, 10.0)], &p);
        let ones = vec![Complex64::new(1.0, 0.0); 2048];
        assert_eq!(apply_calibration(&s, &ones).unwrap(), s);
        let resp: Vec<Complex64> = (0..2048)
            .map(|k| Complex64::from_polar(0.5 + (k as f64 / 2048.0), k as f64 * 0.01))
            .collect();
        let fwd = apply_system_response(&s, &resp).unwrap();
        let back = apply_calibration(&fwd, &resp).unwrap();
        let d = s.direction_index(30.0, 10.0).unwrap();
        let err = back
            .cir(d)
            .iter()
            .zip(s.cir(d))
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-9, "{err}");
        let mut bad = ones.clone();
        bad[7] = Complex64::new(0.0, 0.0);
        assert!(matches!(apply_calibration(&s, &bad), Err(Error::SingularResponse { bin: 7 })));
        assert!(matches!(
            apply_calibration(&s, &ones[..100]),
            Err(Error::ResponseLength { expected: 2048, got: 100 })
        ));
    }

    fn anchored(p: &ParamBundle) -> (DssScan, Vec<DriftAnchor>) {
        let mut mpcs = Vec::new();
        let mut anchors = Vec::new();
        for (i, az) in [0.0, 90.0, 180.0, 270.0].into_iter().enumerate() {
            let tau = (200.0 + 150.0 * i as f64 + 0.37) * p.plan.delay_resolution();
            mpcs.push(path(tau, -100.0, az, 0.0));
            anchors.push(DriftAnchor {
                direction: p.grid.find(az, 0.0).unwrap(),
                true_delay: tau,
            });
        }
        (scan_of(mpcs, p), anchors)
    }

    #[test]
    fn drift_is_removed() {
        let mut p = quiet();
        p.drift = DriftModel {
            offset_at_t0: 0.3e-9,
            slope: 0.8e-9,
        };
        let (s, anchors) = anchored(&p);
        let (c, model) = correct_drift(&s, &anchors, pulse()).unwrap();
        assert!((model.slope - 0.8e-9).abs() < 1e-12, "{model:?}");
        for a in &anchors {
            let cir = c.cir64(a.direction);
            let k = (a.true_delay / p.plan.delay_resolution()).round();
            let (x, _) = refine_delay(&cir, pulse(), k, 1.0);
            let resid = (x * p.plan.delay_resolution() - a.true_delay).abs();
            assert!(resid < 0.1e-9, "{resid}");
        }
    }

    #[test]
    fn zero_drift_correction_is_near_identity() {
        let p = quiet();
        let (s, anchors) = anchored(&p);
        let (c, model) = correct_drift(&s, &anchors, pulse()).unwrap();
        assert!(model.offset_at(360.0).abs() < p.plan.delay_resolution() / 64.0);
        for a in &anchors {
            let (k0, _) = peak(s.cir(a.direction));
            let (k1, _) = peak(c.cir(a.direction));
            assert_eq!(k0, k1);
        }
        assert!(matches!(correct_drift(&s, &anchors[..1], pulse()), Err(Error::Drift(_))));
        let same = vec![anchors[0], anchors[0]];
        assert!(matches!(correct_drift(&s, &same, pulse()), Err(Error::Drift(_))));
    }

    #[test]
    fn noise_level() {
        let mut p = ParamBundle::default();
        p.sounder.noise_margin = 0.0;
        let s = scan_of(Vec::new(), &p);
        let mean: f64 = s.samples.iter().map(|c| c.norm_sqr() as f64).sum::<f64>() / s.samples.len() as f64;
        assert!((10.0 * mean.log10() + 170.0).abs() < 0.1);
    }

    #[test]
    fn container_round_trip() {
        let mut p = ParamBundle::default();
        p.drift.slope = 1e-10;
        let mut set = MpcSet {
            link: None,
            mpcs: vec![path(3e-7, -95.0, 120.0, -10.0)],
        };
        set.link = Some(LinkInfo {
            rx_index: 4,
            distance: 90.0,
            state: LinkState {
                case: LinkCase::Olos,
                foliage_loss: 12.5,
            },
        });
        let s = simulate_with_pulse(&set, &p, pulse(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut buf = Vec::new();
        write_scan(&mut buf, &s).unwrap();
        let back = read_scan(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, s);
        let e = dealias_extend(&s).unwrap();
        let mut buf2 = Vec::new();
        write_scan(&mut buf2, &e).unwrap();
        assert_eq!(read_scan(&buf2[..], Path::new("mem")).unwrap(), e);
        assert!(matches!(
            read_scan(&buf[..buf.len() - 3], Path::new("t")),
            Err(Error::Schema { .. })
        ));
        assert!(read_scan(&b"NOTASCAN0000"[..], Path::new("t")).is_err());
    }
}
