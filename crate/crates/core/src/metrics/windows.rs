use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::dialogue::PredictionSet;

/// Sliding-window layout over turn positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_turns: usize,
    pub overlap_turns: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_turns: 35, overlap_turns: 15 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.window_turns == 0 {
            return Err(MetricsError::InvalidWindow("window_turns must be positive".into()));
        }
        if self.overlap_turns >= self.window_turns {
            return Err(MetricsError::InvalidWindow(format!(
                "overlap_turns {} must be below window_turns {}",
                self.overlap_turns, self.window_turns
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window_turns - self.overlap_turns
    }
}

/// Windows over `turns` positions: starts at 0 and every stride after while
/// below `turns`, the last one truncated at `turns`.
pub fn make_windows(turns: usize, cfg: &WindowConfig) -> Vec<Range<usize>> {
    assert!(cfg.validate().is_ok(), "invalid window config {cfg:?}");
    if turns == 0 {
        return Vec::new();
    }
    (0..turns).step_by(cfg.stride()).map(|start| start..(start + cfg.window_turns).min(turns)).collect()
}

/// Checks that `ranges` are exactly the layout `make_windows` produces, in any order.
pub(crate) fn check_layout(
    task_id: &str,
    turns: usize,
    cfg: &WindowConfig,
    ranges: &[Range<usize>],
) -> Result<(), MetricsError> {
    let expected = make_windows(turns, cfg);
    for r in ranges {
        if !expected.contains(r) {
            return Err(MetricsError::WindowMismatch { task_id: task_id.to_string(), start: r.start, end: r.end });
        }
    }
    if let Some(missing) = expected.iter().find(|r| !ranges.contains(r)) {
        return Err(MetricsError::MissingWindow {
            task_id: task_id.to_string(),
            start: missing.start,
            end: missing.end,
        });
    }
    Ok(())
}

/// Union of per-window predictions, per modality.
pub fn merge_windows<'a>(windows: impl IntoIterator<Item = (&'a Range<usize>, &'a PredictionSet)>) -> PredictionSet {
    let mut out = PredictionSet::default();
    for (_, p) in windows {
        out.union_with(p);
    }
    out
}

/// Merges windowed predictions for one task after validating the layout.
pub fn merge_task_windows(
    task_id: &str,
    turns: usize,
    cfg: &WindowConfig,
    windows: &[(Range<usize>, PredictionSet)],
) -> Result<PredictionSet, MetricsError> {
    let ranges: Vec<_> = windows.iter().map(|(r, _)| r.clone()).collect();
    check_layout(task_id, turns, cfg, &ranges)?;
    Ok(merge_windows(windows.iter().map(|(r, p)| (r, p))))
}
