use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense joint table `p[x][y][z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

impl Joint3 {
    pub fn new(nx: usize, ny: usize, nz: usize, p: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 || p.len() != nx * ny * nz {
            return Err(Error::Distribution(format!(
                "{} entries for a {nx}x{ny}x{nz} table",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Distribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Distribution(format!("entries sum to {total}")));
        }
        Ok(Self { nx, ny, nz, p })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.p[(x * self.ny + y) * self.nz + z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiGap {
    /// `I(X; Y, Z) - I(X; Y)` from direct mutual-information sums.
    pub gap: f64,
    /// `KL(p(x,y,z) || p(x|y) p(z|y) p(y))`.
    pub kl_form: f64,
    pub residual: f64,
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Information the third variable adds about the first beyond the second,
/// computed both as a difference of mutual informations and as a
/// conditional KL divergence (nats).
pub fn mi_gap(j: &Joint3) -> MiGap {
    let (nx, ny, nz) = (j.nx, j.ny, j.nz);
    let mut px = vec![0.0; nx];
    let mut py = vec![0.0; ny];
    let mut pxy = vec![0.0; nx * ny];
    let mut pyz = vec![0.0; ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = j.at(x, y, z);
                px[x] += v;
                py[y] += v;
                pxy[x * ny + y] += v;
                pyz[y * nz + z] += v;
            }
        }
    }
    let mut i_x_yz = 0.0;
    let mut i_x_y = 0.0;
    let mut kl = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            i_x_y += xlogy_ratio(pxy[x * ny + y], px[x] * py[y]);
            for z in 0..nz {
                let v = j.at(x, y, z);
                if v == 0.0 {
                    continue;
                }
                i_x_yz += xlogy_ratio(v, px[x] * pyz[y * nz + z]);
                let factored = pxy[x * ny + y] * pyz[y * nz + z] / py[y];
                kl += xlogy_ratio(v, factored);
            }
        }
    }
    let gap = i_x_yz - i_x_y;
    MiGap {
        gap,
        kl_form: kl,
        residual: (gap - kl).abs(),
    }
}
