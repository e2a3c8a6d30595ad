//! Exponential moving average of flattened model parameters:
//! `next = alpha * current + (1 - alpha) * student`.

use serde::{Deserialize, Serialize};

use crate::error::EmaError;

pub const DEFAULT_ALPHA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: String,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: impl Into<String>, values: Vec<f64>) -> Result<Self, EmaError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmaError::NonFinite(i));
        }
        Ok(Self {
            layout: layout.into(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub alpha: f64,
    pub current: ParamVector,
    pub step: u64,
}

impl EmaState {
    pub fn new(alpha: f64, initial: ParamVector) -> Result<Self, EmaError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EmaError::InvalidAlpha(alpha));
        }
        Ok(Self {
            alpha,
            current: initial,
            step: 0,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("EMA state always serializes")
    }
}

/// One EMA step. Each output entry is clamped to the closed interval between
/// its two inputs so rounding never leaves the convex hull.
pub fn ema_update(state: &EmaState, student: &ParamVector) -> Result<EmaState, EmaError> {
    let cur = &state.current;
    if cur.layout != student.layout || cur.len() != student.len() {
        return Err(EmaError::LayoutMismatch {
            state: cur.layout.clone(),
            state_len: cur.len(),
            student: student.layout.clone(),
            student_len: student.len(),
        });
    }
    if let Some(i) = student.values.iter().position(|v| !v.is_finite()) {
        return Err(EmaError::NonFinite(i));
    }
    let a = state.alpha;
    let values = cur
        .values
        .iter()
        .zip(&student.values)
        .map(|(&c, &s)| (a * c + (1.0 - a) * s).clamp(c.min(s), c.max(s)))
        .collect();
    Ok(EmaState {
        alpha: a,
        current: ParamVector {
            layout: cur.layout.clone(),
            values,
        },
        step: state.step + 1,
    })
}
