//! Time handling by channel folding, so a 2D operator can map trajectories.

use serde::{Deserialize, Serialize};

use super::FnoModel;
use crate::datamodel::{Field, FieldData, Grid2D, Trajectory};
use crate::error::{shape_err, Result};
use crate::pdegen::{NsSettings, Pde, RdSettings};
use nopt_diff::Scalar;

/// How samples of a task become operator inputs and targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeAdapter {
    /// Snapshot to snapshot.
    Static { in_channels: usize, out_channels: usize },
    /// `t_in` frames of `channels` fields predict the next frame.
    NextStep { t_in: usize, channels: usize },
    /// The initial state, repeated per output frame with `x, y, t` coordinate
    /// channels, maps to `frames` states at once.
    OneShot { frames: usize, channels: usize, dt: f64 },
}

impl TimeAdapter {
    pub fn for_pde(pde: Pde, rd: &RdSettings, ns: &NsSettings) -> Self {
        match pde {
            Pde::Poisson => Self::Static {
                in_channels: 4,
                out_channels: 1,
            },
            Pde::Helmholtz => Self::Static {
                in_channels: 2,
                out_channels: 1,
            },
            Pde::Rd => Self::NextStep {
                t_in: rd.t_in,
                channels: 2,
            },
            Pde::Ns => Self::OneShot {
                frames: ns.frames,
                channels: 1,
                dt: ns.record_dt,
            },
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            Self::Static { in_channels, .. } => in_channels,
            Self::NextStep { t_in, channels } => t_in * channels,
            Self::OneShot { frames, channels, .. } => frames * (channels + 3),
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            Self::Static { out_channels, .. } => out_channels,
            Self::NextStep { channels, .. } => channels,
            Self::OneShot { frames, channels, .. } => frames * channels,
        }
    }

    /// Flags the coordinate channels among the operator inputs.
    pub fn coordinate_channels(&self) -> Vec<bool> {
        match *self {
            Self::OneShot { frames, channels, .. } => (0..frames * (channels + 3))
                .map(|c| c % (channels + 3) >= channels)
                .collect(),
            _ => vec![false; self.in_channels()],
        }
    }

    /// Operator input for a sample input. A single snapshot given to a
    /// next-step adapter (unlabeled data) is repeated over the window.
    pub fn input(&self, x: &FieldData, grid: &Grid2D) -> Result<Field> {
        match (*self, x) {
            (Self::Static { .. }, FieldData::Field(f)) => Ok(f.clone()),
            (Self::NextStep { t_in, .. }, FieldData::Trajectory(tr)) => {
                if tr.len() != t_in {
                    return Err(shape_err("input window", t_in, tr.len()));
                }
                Ok(tr.fold())
            }
            (Self::NextStep { t_in, .. }, FieldData::Field(f)) => {
                Ok(Trajectory::new(vec![f.clone(); t_in], 1.0)?.fold())
            }
            (Self::OneShot { frames, dt, .. }, FieldData::Field(f)) => one_shot_input(f, frames, dt, grid),
            _ => Err(shape_err("sample input", format!("{self:?}"), "mismatched layout")),
        }
    }

    /// Training target for a labeled sample: the whole solution, or the
    /// first solution frame for next-step forecasting.
    pub fn target(&self, y: &FieldData) -> Result<Field> {
        match (*self, y) {
            (Self::Static { .. }, FieldData::Field(f)) => Ok(f.clone()),
            (Self::NextStep { .. }, FieldData::Trajectory(tr)) => Ok(tr.frame(0).clone()),
            (Self::OneShot { frames, .. }, FieldData::Trajectory(tr)) => {
                if tr.len() != frames {
                    return Err(shape_err("solution frames", frames, tr.len()));
                }
                Ok(tr.fold())
            }
            _ => Err(shape_err("sample solution", format!("{self:?}"), "mismatched layout")),
        }
    }

    /// Unfolds an operator output back to the solution layout.
    pub fn output(&self, out: Field) -> Result<FieldData> {
        match *self {
            Self::OneShot { frames, dt, .. } => Ok(Trajectory::unfold(&out, frames, dt)?.into()),
            _ => Ok(out.into()),
        }
    }
}

/// `x`, `y` and constant `t` channels on `grid`.
pub fn coordinate_channels(grid: &Grid2D, t: f64) -> Field {
    let (h, w) = (grid.h, grid.w);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..h {
        data.extend((0..w).map(|i| grid.x(i) as f32));
    }
    for j in 0..h {
        data.extend(std::iter::repeat_n(grid.y(j) as f32, w));
    }
    data.extend(std::iter::repeat_n(t as f32, h * w));
    Field::new(3, h, w, data).expect("coordinate layout")
}

/// Folds a window of frames into channels.
pub fn next_step_input(window: &Trajectory) -> Field {
    window.fold()
}

/// `w0` repeated `frames` times, each copy followed by its `x, y, t`
/// coordinate channels.
pub fn one_shot_input(w0: &Field, frames: usize, dt: f64, grid: &Grid2D) -> Result<Field> {
    if (w0.h(), w0.w()) != (grid.h, grid.w) {
        return Err(shape_err("grid", format!("{}x{}", grid.h, grid.w), format!("{}x{}", w0.h(), w0.w())));
    }
    let parts = (0..frames)
        .map(|t| w0.concat(&coordinate_channels(grid, t as f64 * dt)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::new(parts, dt)?.fold())
}

/// Runs the model on one sample input and returns the solution layout.
pub fn predict_trajectory<T: Scalar>(
    model: &FnoModel<T>,
    adapter: &TimeAdapter,
    x: &FieldData,
    grid: &Grid2D,
) -> Result<FieldData> {
    adapter.output(model.forward(&adapter.input(x, grid)?)?)
}
