//! Numeric scalar bound, token grids and trainable parameter plumbing.

use std::iter::Sum;

use ndarray::{Array, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Dimension, NdFloat};
use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Floating point scalar used throughout the model. Implemented for `f32`
/// (training) and `f64` (gradient checks).
pub trait Real: NdFloat + FromPrimitive + Sum {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Spatial layout of a batch of token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridShape {
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridShape {
    pub fn new(batch: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            batch,
            grid_h,
            grid_w,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens()
    }
}

/// A batch of patch-token sequences with a 2-D token layout.
///
/// Data is stored as `(batch, tokens, channels)` with tokens in row-major grid
/// order, so `token = row * grid_w + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F> {
    data: Array3<F>,
    grid_h: usize,
    grid_w: usize,
}

impl<F: Real> TokenGrid<F> {
    pub fn new(data: Array3<F>, grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::config("token grid dimensions must be positive"));
        }
        if data.dim().1 != grid_h * grid_w {
            return Err(Error::config(format!(
                "token count {} does not match grid {}x{}",
                data.dim().1,
                grid_h,
                grid_w
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            data,
            grid_h,
            grid_w,
        })
    }

    pub fn zeros(shape: GridShape, dim: usize) -> Self {
        Self {
            data: Array3::zeros((shape.batch, shape.tokens(), dim)),
            grid_h: shape.grid_h,
            grid_w: shape.grid_w,
        }
    }

    /// Builds a grid from a `(batch * tokens, channels)` row matrix.
    pub fn from_rows(rows: Array2<F>, shape: GridShape) -> Result<Self> {
        let (r, d) = rows.dim();
        if r != shape.rows() {
            return Err(Error::config(format!(
                "row count {r} does not match batch {} x grid {}x{}",
                shape.batch, shape.grid_h, shape.grid_w
            )));
        }
        let rows = if rows.is_standard_layout() {
            rows
        } else {
            rows.as_standard_layout().into_owned()
        };
        let data = rows
            .into_shape_with_order((shape.batch, shape.tokens(), d))
            .map_err(|e| Error::config(e.to_string()))?;
        Self::new(data, shape.grid_h, shape.grid_w)
    }

    pub fn shape(&self) -> GridShape {
        GridShape::new(self.batch(), self.grid_h, self.grid_w)
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<F> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    /// `(batch * tokens, channels)` view of the same storage.
    pub fn rows(&self) -> ArrayView2<'_, F> {
        let (b, n, d) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((b * n, d))
            .expect("token grid is contiguous")
    }

    pub fn to_rows(&self) -> Array2<F> {
        self.rows().to_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim() && self.grid_h == other.grid_h
    }

    /// Element-wise sum of grids sharing one layout.
    pub fn sum_of(grids: &[&TokenGrid<F>]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::config("cannot sum an empty list of grids"))?;
        let mut acc = (*first).clone();
        for g in &grids[1..] {
            if !g.same_layout(first) {
                return Err(Error::config("grids to be summed have different shapes"));
            }
            acc.data += &g.data;
        }
        Ok(acc)
    }

    /// Concatenates grids along the channel axis.
    pub fn concat_channels(grids: &[&TokenGrid<F>]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::config("cannot concatenate an empty list of grids"))?;
        let views: Vec<_> = grids.iter().map(|g| g.data.view()).collect();
        let data = ndarray::concatenate(ndarray::Axis(2), &views)
            .map_err(|e| Error::config(format!("channel concat: {e}")))?;
        Self::new(data, first.grid_h, first.grid_w)
    }

    pub fn mapv(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            data: self.data.mapv(f),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    pub fn cast<G: Real>(&self) -> TokenGrid<G> {
        TokenGrid {
            data: self
                .data
                .mapv(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan())),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F, D: Dimension> {
    pub value: Array<F, D>,
    pub grad: Array<F, D>,
}

impl<F: Real, D: Dimension> Param<F, D> {
    pub fn new(value: Array<F, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn slot(&mut self) -> ParamSlot<'_, F> {
        ParamSlot {
            value: self.value.view_mut().into_dyn(),
            grad: self.grad.view_mut().into_dyn(),
        }
    }
}

/// Mutable access to one parameter tensor and its gradient.
pub struct ParamSlot<'a, F> {
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Anything owning trainable parameters under hierarchical names.
pub trait Module<F: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>));

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, slot| {
            let mut g = slot.grad;
            g.fill(F::zero());
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_values("", &mut |_, v| n += v.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Order-sensitive hash of every parameter bit pattern.
pub fn param_checksum<F: Real, M: Module<F> + ?Sized>(module: &M) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    module.visit_values("", &mut |name, v| {
        name.hash(&mut h);
        for x in v.iter() {
            x.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
        }
    });
    h.finish()
}
