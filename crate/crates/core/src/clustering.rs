//! Density clustering of multipath components over the multipath component
//! distance (MCD).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ClusteringParams;
use crate::synth::{Mpc, MpcSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub clusters: Vec<Cluster>,
    pub noise: Vec<usize>,
    pub params: ClusteringParams,
    pub n_points: usize,
}

impl ClusterResult {
    /// Per-point labels, −1 for noise.
    pub fn labels(&self) -> Vec<i64> {
        let mut l = vec![-1; self.n_points];
        for c in &self.clusters {
            for &m in &c.members {
                l[m] = c.id as i64;
            }
        }
        l
    }

    /// Writes the labels back into the set's `cluster_id` fields.
    pub fn apply(&self, set: &mut MpcSet) {
        for (m, l) in set.mpcs.iter_mut().zip(self.labels()) {
            m.cluster_id = usize::try_from(l).ok();
        }
    }

    /// Builds a result from existing `cluster_id` labels.
    pub fn from_set(set: &MpcSet, params: ClusteringParams) -> Self {
        let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let mut noise = Vec::new();
        for (i, m) in set.mpcs.iter().enumerate() {
            match m.cluster_id {
                Some(c) => by_id.entry(c).or_default().push(i),
                None => noise.push(i),
            }
        }
        ClusterResult {
            clusters: by_id
                .into_iter()
                .map(|(id, members)| Cluster { id, members })
                .collect(),
            noise,
            params,
            n_points: set.len(),
        }
    }
}

pub fn unit_vector(az_deg: f64, el_deg: f64) -> [f64; 3] {
    let (a, e) = (az_deg.to_radians(), el_deg.to_radians());
    [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
}

/// `sqrt(‖u_a − u_b‖²/4 + (ζ·|τ_a − τ_b|·τ_std/τ_max²)²)`.
pub fn mcd(a: &Mpc, b: &Mpc, zeta: f64, tau_max: f64, tau_std: f64) -> f64 {
    let ua = unit_vector(a.azimuth, a.elevation);
    let ub = unit_vector(b.azimuth, b.elevation);
    let ang2: f64 = ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 4.0;
    let dt = if tau_max > 0.0 {
        zeta * (a.delay - b.delay).abs() * tau_std / (tau_max * tau_max)
    } else {
        0.0
    };
    (ang2 + dt * dt).sqrt()
}

/// Delay normalisation of a set: (range, sample standard deviation).
pub fn delay_scales(mpcs: &[Mpc]) -> (f64, f64) {
    if mpcs.len() < 2 {
        return (0.0, 0.0);
    }
    let lo = mpcs.iter().map(|m| m.delay).fold(f64::INFINITY, f64::min);
    let hi = mpcs.iter().map(|m| m.delay).fold(f64::NEG_INFINITY, f64::max);
    let n = mpcs.len() as f64;
    let mean = mpcs.iter().map(|m| m.delay - lo).sum::<f64>() / n;
    let var = mpcs.iter().map(|m| (m.delay - lo - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (hi - lo, var.sqrt())
}

/// DBSCAN over the MCD metric.
///
/// Points are visited in a canonical order (delay, then azimuth, elevation,
/// gain) so the partition does not depend on the input order. Cluster ids
/// follow the order in which clusters are discovered.
pub fn dbscan(mpcs: &[Mpc], params: &ClusteringParams) -> Result<ClusterResult> {
    if !(params.eps > 0.0) || params.min_pts < 1 {
        return Err(Error::Domain(format!(
            "dbscan needs eps > 0 and min_pts ≥ 1 (got {}, {})",
            params.eps, params.min_pts
        )));
    }
    let n = mpcs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&mpcs[i], &mpcs[j]);
        a.delay
            .total_cmp(&b.delay)
            .then(a.azimuth.total_cmp(&b.azimuth))
            .then(a.elevation.total_cmp(&b.elevation))
            .then(a.gain_db.total_cmp(&b.gain_db))
            .then(i.cmp(&j))
    });
    let sorted: Vec<Mpc> = order.iter().map(|&i| mpcs[i].clone()).collect();
    let (tau_max, tau_std) = delay_scales(&sorted);

    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    mcd(&sorted[i], &sorted[j], params.delay_weight, tau_max, tau_std)
                        <= params.eps
                })
                .collect()
        })
        .collect();

    const UNSEEN: i64 = -2;
    let mut label = vec![UNSEEN; n];
    let mut next = 0i64;
    for p in 0..n {
        if label[p] != UNSEEN {
            continue;
        }
        if neighbours[p].len() < params.min_pts {
            label[p] = -1;
            continue;
        }
        label[p] = next;
        let mut queue: Vec<usize> = neighbours[p].clone();
        let mut k = 0;
        while k < queue.len() {
            let q = queue[k];
            k += 1;
            if label[q] == -1 {
                label[q] = next;
            }
            if label[q] != UNSEEN {
                continue;
            }
            label[q] = next;
            if neighbours[q].len() >= params.min_pts {
                queue.extend(neighbours[q].iter().copied());
            }
        }
        next += 1;
    }

    let mut clusters: Vec<Cluster> = (0..next as usize)
        .map(|id| Cluster {
            id,
            members: Vec::new(),
        })
        .collect();
    let mut noise = Vec::new();
    for (s, &orig) in order.iter().enumerate() {
        match usize::try_from(label[s]) {
            Ok(c) => clusters[c].members.push(orig),
            Err(_) => noise.push(orig),
        }
    }
    for c in &mut clusters {
        c.members.sort_unstable();
    }
    noise.sort_unstable();
    Ok(ClusterResult {
        clusters,
        noise,
        params: *params,
        n_points: n,
    })
}

/// Adjusted Rand index between two labelings. Negative labels mark noise and
/// are treated as singletons.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let relabel = |l: &[i64]| -> Vec<i64> {
        let mut next = l.iter().copied().max().unwrap_or(0).max(0) + 1;
        l.iter()
            .map(|&x| {
                if x < 0 {
                    next += 1;
                    next
                } else {
                    x
                }
            })
            .collect()
    };
    let (a, b) = (relabel(a), relabel(b));
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut ra: HashMap<i64, u64> = HashMap::new();
    let mut rb: HashMap<i64, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(&b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n as u64);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

pub fn write_cluster_csv<W: Write>(mut w: W, result: &ClusterResult) -> std::io::Result<()> {
    writeln!(
        w,
        "# eps={} min_pts={} delay_weight={}",
        result.params.eps, result.params.min_pts, result.params.delay_weight
    )?;
    writeln!(w, "mpc_index,cluster_id")?;
    for (i, l) in result.labels().iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

pub fn read_cluster_labels<R: BufRead>(r: R, path: &Path) -> Result<Vec<i64>> {
    let mut labels = Vec::new();
    let mut header = false;
    for line in r.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line != "mpc_index,cluster_id" {
                return Err(Error::schema(path, format!("unexpected header `{line}`")));
            }
            header = true;
            continue;
        }
        let (i, l) = line
            .split_once(',')
            .ok_or_else(|| Error::schema(path, format!("bad row `{line}`")))?;
        let i: usize = i
            .parse()
            .map_err(|_| Error::schema(path, format!("bad index `{i}`")))?;
        if i != labels.len() {
            return Err(Error::schema(path, format!("row {i} out of order")));
        }
        labels.push(
            l.parse()
                .map_err(|_| Error::schema(path, format!("bad label `{l}`")))?,
        );
    }
    Ok(labels)
}
