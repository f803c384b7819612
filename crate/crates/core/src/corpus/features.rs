use std::io::{Read, Write};

use umnmt_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"UMFM";
pub const FEATURE_VERSION: u32 = 1;

/// `k` spatial cells of width `d_img`, laid out on a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureGrid {
    data: Tensor,
    grid_side: usize,
}

impl ImageFeatureGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        let k = data.rows();
        let grid_side = (k as f64).sqrt().round() as usize;
        if k == 0 || grid_side * grid_side != k {
            return Err(Error::Data(format!(
                "{k} image cells do not form a square grid"
            )));
        }
        if data.cols() == 0 {
            return Err(Error::Data("image features have zero width".into()));
        }
        if !data.is_finite() {
            return Err(Error::Data(
                "image features contain non-finite values".into(),
            ));
        }
        Ok(Self { data, grid_side })
    }

    pub fn k(&self) -> usize {
        self.data.rows()
    }

    pub fn d_img(&self) -> usize {
        self.data.cols()
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn data(&self) -> &[Real] {
        self.data.data()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Real] {
        self.data.data_mut()
    }

    /// Reorders cells: output cell `i` is input cell `order[i]`.
    pub fn permute_cells(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.k() {
            return Err(Error::Data("cell permutation has the wrong length".into()));
        }
        let rows: Vec<&[Real]> = order.iter().map(|&i| self.data.row(i)).collect();
        Self::new(Tensor::from_rows(&rows)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes grids in the little-endian `UMFM` layout with f32 payloads.
pub fn write_features<W: Write>(mut w: W, grids: &[ImageFeatureGrid]) -> Result<()> {
    let (k, d) = match grids.first() {
        Some(g) => (g.k(), g.d_img()),
        None => (0, 0),
    };
    if grids.iter().any(|g| g.k() != k || g.d_img() != d) {
        return Err(Error::Data("feature grids differ in shape".into()));
    }
    w.write_all(FEATURE_MAGIC)?;
    for v in [FEATURE_VERSION, grids.len() as u32, k as u32, d as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(k * d * 4);
    for g in grids {
        buf.clear();
        for &v in g.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<Vec<ImageFeatureGrid>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format("feature file", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::format(
            "feature file",
            format!("unsupported version {version}"),
        ));
    }
    let n = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut buf = vec![0u8; k * d * 4];
    let mut grids = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("feature file", "truncated record"))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect();
        grids.push(ImageFeatureGrid::new(Tensor::new(k, d, data)?)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("feature file", "trailing bytes"));
    }
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(k: usize, d: usize, offset: f64) -> ImageFeatureGrid {
        let data = (0..k * d).map(|i| i as f64 * 0.25 + offset).collect();
        ImageFeatureGrid::new(Tensor::new(k, d, data).unwrap()).unwrap()
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(ImageFeatureGrid::new(Tensor::zeros(3, 2)).is_err());
        let mut t = Tensor::zeros(4, 2);
        t.data_mut()[1] = f64::NAN;
        assert!(ImageFeatureGrid::new(t).is_err());
        assert_eq!(grid(16, 3, 0.0).grid_side(), 4);
    }

    #[test]
    fn file_round_trip() {
        let grids = vec![grid(4, 3, 0.0), grid(4, 3, 1.0)];
        let mut buf = Vec::new();
        write_features(&mut buf, &grids).unwrap();
        assert_eq!(&buf[..4], b"UMFM");
        assert_eq!(buf.len(), 20 + 2 * 4 * 3 * 4);
        assert_eq!(read_features(&buf[..]).unwrap(), grids);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let mut buf = Vec::new();
        write_features(&mut buf, &[grid(4, 2, 0.0)]).unwrap();
        assert!(read_features(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_features(&buf[..]).is_err());
    }
}
