//! Large-scale propagation: free-space and close-in path loss, shadowing,
//! foliage excess loss, and LoS/OLoS classification of route positions.
//!
//! All losses are positive dB.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::params::FoliageParams;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Free-space path loss `20·log10(4π·f·d/c)` in dB.
pub fn fspl(freq: f64, distance: f64) -> Result<f64> {
    if !(freq > 0.0) || !(distance > 0.0) {
        return Err(Error::Domain(format!(
            "fspl needs positive frequency and distance (got {freq} Hz, {distance} m)"
        )));
    }
    Ok(20.0 * (4.0 * PI * freq * distance / SPEED_OF_LIGHT).log10())
}

/// Close-in reference-distance path loss with a shadow-fading draw, dB.
pub fn ci_path_loss(freq: f64, distance: f64, ple: f64, shadow_draw: f64) -> Result<f64> {
    if !(distance >= 1.0) {
        return Err(Error::Domain(format!(
            "close-in model needs distance ≥ 1 m (got {distance})"
        )));
    }
    Ok(fspl(freq, 1.0)? + 10.0 * ple * distance.log10() + shadow_draw)
}

/// Loss of a path in excess of free space at the length implied by its delay.
///
/// Can come out negative on noisy estimates; callers decide about clamping.
pub fn foliage_excess_loss(pl_path: f64, path_delay: f64, freq: f64) -> Result<f64> {
    if !(path_delay > 0.0) {
        return Err(Error::Domain(format!("path delay must be positive (got {path_delay})")));
    }
    Ok(pl_path - fspl(freq, SPEED_OF_LIGHT * path_delay)?)
}

/// Gaussian foliage loss, redrawn until it lands inside the clamp range.
pub fn draw_foliage_loss<R: Rng + ?Sized>(params: &FoliageParams, rng: &mut R) -> f64 {
    let [lo, hi] = params.clamp_range;
    if params.loss_sigma == 0.0 {
        return params.loss_mean;
    }
    let normal = Normal::new(params.loss_mean, params.loss_sigma).expect("finite sigma");
    loop {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkCase {
    #[serde(rename = "LoS")]
    Los,
    #[serde(rename = "OLoS")]
    Olos,
}

impl LinkCase {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkCase::Los => "LoS",
            LinkCase::Olos => "OLoS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "LoS" => Some(LinkCase::Los),
            "OLoS" => Some(LinkCase::Olos),
            _ => None,
        }
    }
}

impl std::fmt::Display for LinkCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    pub case: LinkCase,
    /// dB; zero for LoS links
    pub foliage_loss: f64,
}

impl LinkState {
    pub fn los() -> Self {
        Self {
            case: LinkCase::Los,
            foliage_loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    /// [x, y, z] m; x runs along the route away from the Tx
    pub position: [f64; 3],
    /// reflection loss, dB
    pub reflectivity: f64,
    pub label: String,
    /// Azimuth (deg) of the reflecting face normal. `None` scatters to all sides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facing: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn canopy() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoliageSegment {
    /// route interval [start, end], m
    pub start: f64,
    pub end: f64,
    #[serde(default = "one")]
    pub thickness_proxy: f64,
    /// tree height, m
    #[serde(default = "canopy")]
    pub canopy_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scene {
    pub tx_position: [f64; 3],
    pub rx_positions: Vec<[f64; 3]>,
    pub scatterers: Vec<Scatterer>,
    pub foliage_segments: Vec<FoliageSegment>,
}

impl Default for Scene {
    fn default() -> Self {
        Scene::campaign_route()
    }
}

pub const TX_HEIGHT: f64 = 16.6;
pub const RX_HEIGHT: f64 = 1.6;

/// Tx–Rx distances of the 24-position campaign route, m. The first nine
/// positions have a clear line of sight.
pub const ROUTE_DISTANCES: [f64; 24] = [
    34.0, 42.0, 50.0, 60.0, 72.0, 86.0, 100.0, 118.0, 135.0, 175.0, 190.0, 205.0, 220.0, 235.0,
    250.0, 265.0, 280.0, 300.0, 320.0, 340.0, 360.0, 380.0, 395.0, 410.0,
];
const ROUTE_LOS_COUNT: usize = 9;

pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Scene {
    /// Route position on the x axis whose 3-D distance from a Tx at the
    /// origin (height `TX_HEIGHT`) is `distance`, for an Rx at `RX_HEIGHT`.
    pub fn route_x(distance: f64, height: f64) -> f64 {
        let dz = TX_HEIGHT - height;
        (distance * distance - dz * dz).max(0.0).sqrt()
    }

    /// A straight street with the Tx at x = 0 and Rx positions along +x.
    pub fn route(distances: &[f64]) -> Self {
        Scene {
            tx_position: [0.0, 0.0, TX_HEIGHT],
            rx_positions: distances
                .iter()
                .map(|&d| [Self::route_x(d, RX_HEIGHT), 0.0, RX_HEIGHT])
                .collect(),
            scatterers: Vec::new(),
            foliage_segments: Vec::new(),
        }
    }

    /// The campaign route: 24 positions, 9 LoS, roadside foliage in front of
    /// the others, two guideboards and a sign.
    pub fn campaign_route() -> Self {
        let mut scene = Self::route(&ROUTE_DISTANCES);
        scene.foliage_segments = scene.rx_positions[ROUTE_LOS_COUNT..]
            .iter()
            .map(|p| FoliageSegment {
                start: 0.78 * p[0],
                end: 0.80 * p[0],
                thickness_proxy: 1.0,
                canopy_height: 5.0,
            })
            .collect();
        let board = |d: f64, h: f64| [Self::route_x(d, h), 0.0, h];
        scene.scatterers = vec![
            Scatterer {
                position: board(190.0, 3.0),
                reflectivity: 10.0,
                label: "guideboard".into(),
                facing: Some(180.0),
            },
            Scatterer {
                position: board(230.0, 2.5),
                reflectivity: 18.0,
                label: "sign".into(),
                facing: Some(180.0),
            },
            Scatterer {
                position: board(290.0, 3.0),
                reflectivity: 10.0,
                label: "guideboard-2b".into(),
                facing: Some(0.0),
            },
        ];
        scene
    }

    pub fn rx(&self, rx_index: usize) -> Result<[f64; 3]> {
        self.rx_positions.get(rx_index).copied().ok_or_else(|| {
            Error::Domain(format!(
                "rx index {rx_index} out of range ({} positions)",
                self.rx_positions.len()
            ))
        })
    }

    /// Euclidean Tx–Rx distance, m.
    pub fn distance(&self, rx_index: usize) -> Result<f64> {
        Ok(norm(sub(self.rx(rx_index)?, self.tx_position)))
    }

    /// Arrival direction of the direct path at the Rx, (azimuth, elevation) deg.
    pub fn direct_aoa(&self, rx_index: usize) -> Result<(f64, f64)> {
        Ok(direction_deg(sub(self.tx_position, self.rx(rx_index)?)))
    }

    pub(crate) fn check(&self, out: &mut Vec<Violation>) {
        if !(self.tx_position[2] > 0.0) {
            out.push(Violation::new("scene.tx_position", "height > 0"));
        }
        for (i, p) in self.rx_positions.iter().enumerate() {
            if !(p[2] > 0.0) {
                out.push(Violation::new(format!("scene.rx_positions[{i}]"), "height > 0"));
            }
            let along = p[0] - self.tx_position[0];
            if !(0.0..=500.0).contains(&along) {
                out.push(Violation::new(
                    format!("scene.rx_positions[{i}]"),
                    "route distance within [0, 500] m",
                ));
            }
        }
        for (i, s) in self.scatterers.iter().enumerate() {
            if !(s.reflectivity >= 0.0) {
                out.push(Violation::new(
                    format!("scene.scatterers[{i}].reflectivity"),
                    "reflectivity loss ≥ 0 dB",
                ));
            }
        }
        for (i, f) in self.foliage_segments.iter().enumerate() {
            if !(f.start <= f.end) {
                out.push(Violation::new(
                    format!("scene.foliage_segments[{i}]"),
                    "start ≤ end",
                ));
            }
            if !(f.thickness_proxy >= 0.0) {
                out.push(Violation::new(
                    format!("scene.foliage_segments[{i}].thickness_proxy"),
                    "thickness_proxy ≥ 0",
                ));
            }
        }
    }
}

/// (azimuth in [0, 360), elevation) in degrees of a direction vector.
pub(crate) fn direction_deg(v: [f64; 3]) -> (f64, f64) {
    let horiz = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let az = v[1].atan2(v[0]).to_degrees().rem_euclid(360.0);
    let el = v[2].atan2(horiz).to_degrees();
    (az, el)
}

/// Route interval covered by the part of the Tx–Rx segment that runs below
/// `canopy` height, if any.
fn sub_canopy_interval(tx: [f64; 3], rx: [f64; 3], canopy: f64) -> Option<(f64, f64)> {
    let (tz, rz) = (tx[2], rx[2]);
    let (s_lo, s_hi) = if (tz - rz).abs() < 1e-12 {
        if tz <= canopy {
            (0.0, 1.0)
        } else {
            return None;
        }
    } else {
        // z(s) = tz + s (rz - tz) <= canopy
        let s_cross = (tz - canopy) / (tz - rz);
        if tz > rz {
            (s_cross.max(0.0), 1.0)
        } else {
            (0.0, s_cross.min(1.0))
        }
    };
    if s_lo > s_hi {
        return None;
    }
    let x = |s: f64| tx[0] + s * (rx[0] - tx[0]);
    let (a, b) = (x(s_lo), x(s_hi));
    Some((a.min(b), a.max(b)))
}

/// Classifies a route position as LoS or OLoS.
///
/// A link is OLoS when the ground projection of the below-canopy part of the
/// Tx–Rx segment overlaps a foliage interval. OLoS links get a foliage loss
/// draw multiplied by the summed thickness proxies, clamped to the range.
pub fn classify_link<R: Rng + ?Sized>(
    scene: &Scene,
    rx_index: usize,
    foliage: &FoliageParams,
    rng: &mut R,
) -> Result<LinkState> {
    let rx = scene.rx(rx_index)?;
    let hits: Vec<f64> = scene
        .foliage_segments
        .iter()
        .filter(|seg| {
            sub_canopy_interval(scene.tx_position, rx, seg.canopy_height)
                .is_some_and(|(a, b)| a <= seg.end && seg.start <= b)
        })
        .map(|seg| seg.thickness_proxy)
        .collect();
    if hits.is_empty() {
        return Ok(LinkState::los());
    }
    let proxy: f64 = hits.iter().sum();
    let [lo, hi] = foliage.clamp_range;
    let loss = (draw_foliage_loss(foliage, rng) * proxy).clamp(lo, hi);
    Ok(LinkState {
        case: LinkCase::Olos,
        foliage_loss: loss,
    })
}

/// Writes `distance,case,foliage_loss` rows for a classified route.
pub fn write_route_csv<W: Write>(
    mut w: W,
    rows: &[(f64, LinkState)],
) -> std::io::Result<()> {
    writeln!(w, "distance,case,foliage_loss")?;
    for (d, s) in rows {
        writeln!(w, "{},{},{}", d, s.case, s.foliage_loss)?;
    }
    Ok(())
}
