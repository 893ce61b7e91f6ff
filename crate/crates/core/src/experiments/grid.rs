use std::fmt::Write as _;
use std::path::Path;

use dcd_autodiff::Tensor;

use crate::error::{CoreError, Result};
use crate::model::{energy, EnergyModel};

/// `exp(f)` on a uniform `resolution × resolution` grid, scaled so the
/// largest cell is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub resolution: usize,
    pub x1: (f64, f64),
    pub x2: (f64, f64),
    /// Row-major, row `j` at the `j`-th `x2` value, column `i` at the `i`-th `x1` value.
    pub values: Vec<f64>,
}

impl DensityGrid {
    /// Cell-center coordinate along one axis.
    fn coord(range: (f64, f64), k: usize, r: usize) -> f64 {
        range.0 + (k as f64 + 0.5) * (range.1 - range.0) / r as f64
    }

    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        (
            Self::coord(self.x1, i, self.resolution),
            Self::coord(self.x2, j, self.resolution),
        )
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.resolution + i]
    }

    /// `(i, j)` of the largest cell.
    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > self.values[best] { k } else { best });
        (k % self.resolution, k / self.resolution)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,density\n");
        for j in 0..self.resolution {
            for i in 0..self.resolution {
                let (a, b) = self.point(i, j);
                writeln!(s, "{a:?},{b:?},{:?}", self.value(i, j)).unwrap();
            }
        }
        s
    }

    /// Plain (P2) graymap, top row at the largest `x2`.
    pub fn to_pgm(&self) -> String {
        let r = self.resolution;
        let mut s = format!("P2\n{r} {r}\n255\n");
        for j in (0..r).rev() {
            let row: Vec<String> = (0..r)
                .map(|i| ((self.value(i, j) * 255.0).round() as u8).to_string())
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, csv: Option<&Path>, pgm: Option<&Path>) -> Result<()> {
        if let Some(p) = csv {
            std::fs::write(p, self.to_csv()).map_err(|e| CoreError::io(p, e))?;
        }
        if let Some(p) = pgm {
            std::fs::write(p, self.to_pgm()).map_err(|e| CoreError::io(p, e))?;
        }
        Ok(())
    }
}

pub fn export_grid(
    model: &impl EnergyModel,
    x1: (f64, f64),
    x2: (f64, f64),
    resolution: usize,
) -> Result<DensityGrid> {
    if model.input_dim() != 2 {
        return Err(CoreError::DimMismatch {
            expected: 2,
            got: model.input_dim(),
        });
    }
    if resolution == 0 || !(x1.1 > x1.0) || !(x2.1 > x2.0) {
        return Err(CoreError::Invalid("grid needs positive resolution and non-empty bounds".into()));
    }
    let mut grid = DensityGrid {
        resolution,
        x1,
        x2,
        values: Vec::new(),
    };
    let mut pts = Vec::with_capacity(2 * resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            let (a, b) = grid.point(i, j);
            pts.push(a);
            pts.push(b);
        }
    }
    let x = Tensor::new(vec![resolution * resolution, 2], pts)?;
    let e = energy(model, &x).map_err(|e| CoreError::NonFiniteLoss(format!("grid energies: {e}")))?;
    if !e.is_finite() {
        return Err(CoreError::NonFiniteLoss("grid energies".into()));
    }
    let max = e.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid.values = e.data().iter().map(|v| (v - max).exp()).collect();
    Ok(grid)
}
