use std::io::{BufRead, BufReader, Read, Seek, Write};
use std::path::Path;

use image::{ImageFormat, ImageReader};
use ndarray::{Array2, ArrayView2};

use crate::error::{FlowError, Result};
use crate::training::Integrand;

/// Nonnegative grayscale image read as a function on the unit square.
///
/// `x[0]` runs along columns (left to right) and `x[1]` along rows (top to
/// bottom). Lookup is bilinear between texel centers and clamps to the edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTarget {
    pixels: Array2<f64>,
}

impl ImageTarget {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(FlowError::Empty("image target".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(FlowError::Domain(format!(
                "image value {v} must be finite and nonnegative"
            )));
        }
        if !pixels.iter().any(|&v| v > 0.0) {
            return Err(FlowError::Domain("image target is zero everywhere".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != 2 {
            return Err(FlowError::Shape(format!(
                "image lookup needs 2 coordinates, got {}",
                x.len()
            )));
        }
        if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(FlowError::Domain(format!(
                "lookup point ({}, {}) outside the unit square",
                x[0], x[1]
            )));
        }
        Ok(self.lookup(x[0], x[1]))
    }

    fn lookup(&self, x0: f64, x1: f64) -> f64 {
        let (c0, c1, tc) = texels(x0, self.width());
        let (r0, r1, tr) = texels(x1, self.height());
        let p = &self.pixels;
        let top = p[[r0, c0]] + (p[[r0, c1]] - p[[r0, c0]]) * tc;
        let bottom = p[[r1, c0]] + (p[[r1, c1]] - p[[r1, c0]]) * tc;
        top + (bottom - top) * tr
    }

    /// Exact integral over the unit square. With texel-center interpolation
    /// and edge clamping it is the plain mean of the texels.
    pub fn integral(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    /// Reads a PGM file (plain or binary, 8 or 16 bit). Values are scaled to `[0, 1]`.
    pub fn read_pgm<R: BufRead + Seek>(r: R) -> Result<Self> {
        let img = ImageReader::with_format(r, ImageFormat::Pnm)
            .decode()
            .map_err(|e| FlowError::Format(format!("PGM: {e}")))?
            .into_luma16();
        let (w, h) = img.dimensions();
        let pixels = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            f64::from(img.get_pixel(c as u32, r as u32)[0]) / f64::from(u16::MAX)
        });
        Self::new(pixels)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::read_pgm(BufReader::new(std::fs::File::open(path)?))
    }

    /// Writes a 16-bit binary PGM scaled so the brightest texel is white.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let max = self.pixels.iter().cloned().fold(0.0, f64::max);
        write!(w, "P5\n{} {}\n65535\n", self.width(), self.height())?;
        let mut buf = Vec::with_capacity(2 * self.pixels.len());
        for v in &self.pixels {
            buf.extend_from_slice(&((v / max * f64::from(u16::MAX)).round() as u16).to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

fn texels(t: f64, n: usize) -> (usize, usize, f64) {
    let u = (t * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 1);
    (i, (i + 1).min(n - 1), u - i as f64)
}

impl Integrand for ImageTarget {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&mut self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|row| self.eval(&[row[0], row[1]]))
            .collect()
    }
}

/// Writes a grayscale PFM: little endian, scale -1, rows bottom to top.
/// Grid row 0 is the top of the image.
pub fn write_pfm<W: Write>(mut w: W, grid: ArrayView2<'_, f64>) -> Result<()> {
    let (h, wd) = grid.dim();
    write!(w, "Pf\n{wd} {h}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(h * wd * 4);
    for row in grid.rows().into_iter().rev() {
        for v in row {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a grayscale PFM written by [`write_pfm`] (either byte order).
pub fn read_pfm<R: Read>(r: R) -> Result<Array2<f64>> {
    let mut r = BufReader::new(r);
    let mut header = Vec::new();
    let mut line = String::new();
    while header.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(FlowError::Format("PFM header ended early".into()));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "Pf" {
        return Err(FlowError::Format(format!(
            "expected a grayscale PFM, found magic {:?}",
            header[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| FlowError::Format(format!("bad PFM dimension {s:?}")))
    };
    let (w, h) = (parse(&header[1])?, parse(&header[2])?);
    let scale: f64 = header[3]
        .parse()
        .map_err(|_| FlowError::Format(format!("bad PFM scale {:?}", header[3])))?;
    let mut bytes = vec![0u8; w * h * 4];
    r.read_exact(&mut bytes)?;
    let mut grid = Array2::zeros((h, w));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        grid[[h - 1 - i / w, i % w]] = f64::from(v);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Cursor;

    #[test]
    fn bilinear_lookup() {
        let t = ImageTarget::new(array![[0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(t.eval(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(t.eval(&[0.25, 0.75]).unwrap(), 0.0);
        assert_eq!(t.eval(&[0.75, 0.25]).unwrap(), 1.0);
        assert_eq!(t.eval(&[1.0, 0.0]).unwrap(), 1.0);
        assert!((t.eval(&[0.375, 0.1]).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(t.eval(&[1.1, 0.5]), Err(FlowError::Domain(_))));

        let flat = ImageTarget::new(Array2::from_elem((3, 5), 1.0)).unwrap();
        assert_eq!(flat.eval(&[0.123, 0.987]).unwrap(), 1.0);

        let g = Array2::from_shape_fn((4, 3), |(r, c)| (r * 3 + c) as f64);
        let t = ImageTarget::new(g.clone()).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(
                    t.eval(&[(c as f64 + 0.5) / 3.0, (r as f64 + 0.5) / 4.0])
                        .unwrap(),
                    g[[r, c]]
                );
            }
        }
    }

    #[test]
    fn integral_is_texel_mean() {
        let t = ImageTarget::new(array![[0.0, 4.0, 1.0], [2.0, 0.5, 3.0]]).unwrap();
        let n = 600;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                sum += t
                    .eval(&[(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64])
                    .unwrap();
            }
        }
        assert!((sum / (n * n) as f64 - t.integral()).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_images() {
        assert!(ImageTarget::new(Array2::zeros((2, 2))).is_err());
        assert!(ImageTarget::new(array![[1.0, -1.0]]).is_err());
        assert!(ImageTarget::new(Array2::zeros((0, 0))).is_err());
    }

    #[test]
    fn pgm_round_trip_and_plain_format() {
        let t = ImageTarget::new(array![[0.0, 0.5], [1.0, 0.25]]).unwrap();
        let mut buf = Vec::new();
        t.write_pgm(&mut buf).unwrap();
        let back = ImageTarget::read_pgm(Cursor::new(buf)).unwrap();
        for (a, b) in back.pixels().iter().zip(t.pixels()) {
            assert!((a - b).abs() < 1e-4);
        }
        let plain = "P2\n# comment\n3 1\n255\n0 51 255\n";
        let p = ImageTarget::read_pgm(Cursor::new(plain.as_bytes().to_vec())).unwrap();
        assert_eq!(p.pixels().dim(), (1, 3));
        assert!((p.pixels()[[0, 1]] - 0.2).abs() < 1e-4);
        assert!(ImageTarget::read_pgm(Cursor::new(b"P2\n2 2\n".to_vec())).is_err());
    }

    #[test]
    fn pfm_round_trip() {
        let g = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]];
        let mut buf = Vec::new();
        write_pfm(&mut buf, g.view()).unwrap();
        assert!(buf.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row first
        assert_eq!(&buf[12..16], &4.0f32.to_le_bytes());
        assert_eq!(read_pfm(buf.as_slice()).unwrap(), g);
    }
}
