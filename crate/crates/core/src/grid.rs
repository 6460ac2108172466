//! Regular 2D scalar grids with metric geometry.
//!
//! A cell value sits at the cell center. Continuous cell coordinates are
//! `(p - origin) / resolution`, so integer coordinates land on cell centers
//! and the bilinear footprint of a point `q` is `floor(q) ..= floor(q) + 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Integer cell index `[column, row]`.
pub type Cell = [i64; 2];

const MAGIC: &[u8; 8] = b"GJGRID01";
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    /// World position of the center of cell (0, 0), meters.
    pub origin: Vector2<f64>,
    /// Meters per cell.
    pub resolution: f64,
}

impl GridLayout {
    pub fn new(width: usize, height: usize, origin: Vector2<f64>, resolution: f64) -> Result<Self> {
        let layout = Self {
            width,
            height,
            origin,
            resolution,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Validation(format!(
                "grid must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::Validation(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_to_world(&self, cell: Cell) -> Vector2<f64> {
        cell_to_world(self, cell)
    }

    /// Continuous cell coordinates of a world point.
    pub fn world_to_cell(&self, p: &Vector2<f64>) -> Vector2<f64> {
        (p - self.origin) / self.resolution
    }

    pub fn world_to_cell_floor(&self, p: &Vector2<f64>) -> Cell {
        let q = self.world_to_cell(p);
        [q.x.floor() as i64, q.y.floor() as i64]
    }

    /// The cell whose square contains `p` (cells are centered on their index).
    pub fn world_to_cell_nearest(&self, p: &Vector2<f64>) -> Cell {
        let q = self.world_to_cell(p);
        [(q.x + 0.5).floor() as i64, (q.y + 0.5).floor() as i64]
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell[0] >= 0
            && cell[1] >= 0
            && (cell[0] as usize) < self.width
            && (cell[1] as usize) < self.height
    }

    /// Row-major linear index of an in-bounds cell.
    pub fn index(&self, cell: Cell) -> usize {
        debug_assert!(self.contains(cell));
        cell[1] as usize * self.width + cell[0] as usize
    }

    pub fn cell_of_index(&self, index: usize) -> Cell {
        [(index % self.width) as i64, (index / self.width) as i64]
    }

    /// World-space rectangle covered by the cell squares: `(min, max)`.
    pub fn extent(&self) -> (Vector2<f64>, Vector2<f64>) {
        let half = Vector2::repeat(0.5 * self.resolution);
        let far = Vector2::new(self.width as f64 - 0.5, self.height as f64 - 0.5) * self.resolution;
        (self.origin - half, self.origin + far)
    }
}

/// `origin + cell * resolution`; out-of-bounds cells are fine.
pub fn cell_to_world(layout: &GridLayout, cell: Cell) -> Vector2<f64> {
    layout.origin + Vector2::new(cell[0] as f64, cell[1] as f64) * layout.resolution
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    layout: GridLayout,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn filled(layout: GridLayout, value: f64) -> Self {
        Self {
            layout,
            values: vec![value; layout.len()],
        }
    }

    pub fn zeros(layout: GridLayout) -> Self {
        Self::filled(layout, 0.0)
    }

    pub fn from_values(layout: GridLayout, values: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: layout.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, cell: Cell) -> Option<f64> {
        self.layout
            .contains(cell)
            .then(|| self.values[self.layout.index(cell)])
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.layout.width + col]
    }

    pub fn set(&mut self, cell: Cell, value: f64) {
        let i = self.layout.index(cell);
        self.values[i] = value;
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lower-left corner of the bilinear footprint plus fractional offsets,
    /// or `None` if any of the four corners falls outside the grid.
    #[inline]
    fn footprint(&self, q: &Vector2<f64>) -> Option<(usize, f64, f64)> {
        let fx = q.x.floor();
        let fy = q.y.floor();
        // Also rejects NaN.
        if !(fx >= 0.0
            && fy >= 0.0
            && fx + 1.0 < self.layout.width as f64
            && fy + 1.0 < self.layout.height as f64)
        {
            return None;
        }
        let base = fy as usize * self.layout.width + fx as usize;
        Some((base, q.x - fx, q.y - fy))
    }

    /// Bilinear value at continuous cell coordinates `q`.
    #[inline]
    pub fn interp_bilinear(&self, q: &Vector2<f64>) -> Option<f64> {
        let (base, ax, ay) = self.footprint(q)?;
        let w = self.layout.width;
        let v00 = self.values[base];
        let v10 = self.values[base + 1];
        let v01 = self.values[base + w];
        let v11 = self.values[base + w + 1];
        Some((1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11))
    }

    /// Bilinear value and its analytic gradient (per cell unit) at `q`.
    ///
    /// On an internal cell edge the patch of the cell at `floor(q)` is used.
    #[inline]
    pub fn interp_gradient(&self, q: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        let (base, ax, ay) = self.footprint(q)?;
        let w = self.layout.width;
        let v00 = self.values[base];
        let v10 = self.values[base + 1];
        let v01 = self.values[base + w];
        let v11 = self.values[base + w + 1];
        let value = (1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11);
        let gx = (1.0 - ay) * (v10 - v00) + ay * (v11 - v01);
        let gy = (1.0 - ax) * (v01 - v00) + ax * (v11 - v10);
        Some((value, Vector2::new(gx, gy)))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut header = [0u8; HEADER_LEN];
        header[..8].copy_from_slice(MAGIC);
        header[8..12].copy_from_slice(&(self.layout.width as u32).to_le_bytes());
        header[12..16].copy_from_slice(&(self.layout.height as u32).to_le_bytes());
        header[16..24].copy_from_slice(&self.layout.origin.x.to_le_bytes());
        header[24..32].copy_from_slice(&self.layout.origin.y.to_le_bytes());
        header[32..40].copy_from_slice(&self.layout.resolution.to_le_bytes());
        out.write_all(&header)?;
        let mut payload = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let layout = GridLayout {
            width: u32_at(8),
            height: u32_at(12),
            origin: Vector2::new(f64_at(16), f64_at(24)),
            resolution: f64_at(32),
        };
        layout.validate()?;
        let payload = &bytes[HEADER_LEN..];
        let expected = layout.len() * 8;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Grid2D::from_values(layout, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "grid file",
                path: path.to_owned(),
            },
            _ => Error::Io(e),
        })?;
        Self::read_from(BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Log-odds to gray: occupied dark, free light, unknown mid-gray.
    Occupancy,
    /// Observation counts normalized by the maximum: unobserved white.
    Hits,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gray level of a single cell; rounds half away from zero.
pub fn gray_level(value: f64, mode: RenderMode, max_count: f64) -> u8 {
    let g = match mode {
        RenderMode::Occupancy => 255.0 * (1.0 - logistic(value)),
        RenderMode::Hits if max_count > 0.0 => 255.0 * (1.0 - value / max_count),
        RenderMode::Hits => 255.0,
    };
    g.round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5, maxval 255). The top image row is the highest grid row.
pub fn render_pgm<W: Write>(grid: &Grid2D, mode: RenderMode, mut out: W) -> Result<()> {
    let GridLayout { width, height, .. } = *grid.layout();
    let max_count = grid.max();
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.reserve(width * height);
    for row in (0..height).rev() {
        for col in 0..width {
            buf.push(gray_level(grid.at(col, row), mode, max_count));
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn save_pgm(grid: &Grid2D, mode: RenderMode, path: impl AsRef<Path>) -> Result<()> {
    render_pgm(grid, mode, BufWriter::new(File::create(path)?))
}
