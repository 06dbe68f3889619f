use std::collections::BTreeSet;

use crate::error::{arg_err, shape_err, Result};
use crate::flow::{neighbour_frames, FlowSet};

/// `(frame, row, col)` of a sampled key; orders frame-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyCoord {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

impl KeyCoord {
    pub fn new(frame: usize, row: usize, col: usize) -> Self {
        Self { frame, row, col }
    }
}

impl From<(usize, usize, usize)> for KeyCoord {
    fn from((frame, row, col): (usize, usize, usize)) -> Self {
        Self { frame, row, col }
    }
}

/// Extents of the feature sequence keys are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Bounds {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyOrigin {
    /// Keys of a single query at `(row, col)` of frame `t`.
    Query { t: usize, row: usize, col: usize },
    /// Union over the `window x window` queries centred at `(row, col)`.
    Window { t: usize, row: usize, col: usize, window: usize },
}

/// Deduplicated key coordinates in canonical `(frame, row, col)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyCoordSet {
    coords: Vec<KeyCoord>,
    origin: KeyOrigin,
}

impl KeyCoordSet {
    pub fn new(coords: impl IntoIterator<Item = KeyCoord>, origin: KeyOrigin) -> Self {
        let set: BTreeSet<KeyCoord> = coords.into_iter().collect();
        Self {
            coords: set.into_iter().collect(),
            origin,
        }
    }

    pub fn coords(&self) -> &[KeyCoord] {
        &self.coords
    }

    pub fn origin(&self) -> KeyOrigin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, k: &KeyCoord) -> bool {
        self.coords.binary_search(k).is_ok()
    }

    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.coords.iter().map(|k| (k.frame, k.row, k.col)).collect()
    }
}

fn check_pos(pos: (usize, usize), t: usize, bounds: Bounds) -> Result<()> {
    if t >= bounds.frames || pos.0 >= bounds.height || pos.1 >= bounds.width {
        return arg_err(format!(
            "position {pos:?} of frame {t} outside {bounds:?}"
        ));
    }
    Ok(())
}

/// Flow-sampled keys of one query: one rounded, border-clamped sample per
/// temporal neighbour, in offset order (duplicates retained).
pub(crate) fn omega_samples(
    pos: (usize, usize),
    t: usize,
    flows: &FlowSet,
    r: usize,
    bounds: Bounds,
) -> Result<Vec<KeyCoord>> {
    let (i, j) = pos;
    let mut out = Vec::with_capacity(2 * r + 1);
    for f in neighbour_frames(t, r, bounds.frames) {
        let (dx, dy) = if f == t {
            (0, 0)
        } else {
            let flow = flows.get(t, f)?;
            if flow.height() != bounds.height || flow.width() != bounds.width {
                return shape_err(format!(
                    "flow ({t}, {f}) is {}x{}, features are {}x{}",
                    flow.height(),
                    flow.width(),
                    bounds.height,
                    bounds.width
                ));
            }
            flow.rounded_at(i, j)?
        };
        let row = (i as i64 + dx).clamp(0, bounds.height as i64 - 1) as usize;
        let col = (j as i64 + dy).clamp(0, bounds.width as i64 - 1) as usize;
        out.push(KeyCoord::new(f, row, col));
    }
    Ok(out)
}

/// Key set of the query at `pos` in frame `t`.
pub fn build_omega(
    pos: (usize, usize),
    t: usize,
    flows: &FlowSet,
    r: usize,
    bounds: Bounds,
) -> Result<KeyCoordSet> {
    check_pos(pos, t, bounds)?;
    let samples = omega_samples(pos, t, flows, r, bounds)?;
    Ok(KeyCoordSet::new(
        samples,
        KeyOrigin::Query {
            t,
            row: pos.0,
            col: pos.1,
        },
    ))
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return arg_err(format!("window size must be odd and positive, got {window}"));
    }
    Ok(())
}

/// Query positions `|m - i| <= M/2, |n - j| <= M/2` inside the frame.
pub fn window_queries(center: (usize, usize), window: usize, bounds: Bounds) -> Vec<(usize, usize)> {
    let half = window / 2;
    let rows = center.0.saturating_sub(half)..(center.0 + half + 1).min(bounds.height);
    let cols = center.1.saturating_sub(half)..(center.1 + half + 1).min(bounds.width);
    rows.flat_map(|m| cols.clone().map(move |n| (m, n))).collect()
}

/// Union of the key sets of every query in the window centred at `center`.
pub fn build_psi(
    center: (usize, usize),
    t: usize,
    window: usize,
    flows: &FlowSet,
    r: usize,
    bounds: Bounds,
) -> Result<KeyCoordSet> {
    check_window(window)?;
    check_pos(center, t, bounds)?;
    psi_for(&window_queries(center, window, bounds), center, t, window, flows, r, bounds)
}

pub(crate) fn psi_for(
    queries: &[(usize, usize)],
    center: (usize, usize),
    t: usize,
    window: usize,
    flows: &FlowSet,
    r: usize,
    bounds: Bounds,
) -> Result<KeyCoordSet> {
    let mut all = BTreeSet::new();
    for &q in queries {
        all.extend(omega_samples(q, t, flows, r, bounds)?);
    }
    Ok(KeyCoordSet {
        coords: all.into_iter().collect(),
        origin: KeyOrigin::Window {
            t,
            row: center.0,
            col: center.1,
            window,
        },
    })
}

/// One tile of a [`WindowGrid`]; edge tiles may be truncated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    /// Nominal centre `(row0 + M/2, col0 + M/2)`; may fall outside a truncated tile.
    pub center: (usize, usize),
}

impl Window {
    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row0 + self.rows)
            .flat_map(move |m| (self.col0..self.col0 + self.cols).map(move |n| (m, n)))
    }
}

/// Non-overlapping `M x M` tiling anchored at the top-left corner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub height: usize,
    pub width: usize,
    windows: Vec<Window>,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        check_window(window)?;
        let mut windows = Vec::new();
        for row0 in (0..height).step_by(window) {
            for col0 in (0..width).step_by(window) {
                windows.push(Window {
                    row0,
                    col0,
                    rows: window.min(height - row0),
                    cols: window.min(width - col0),
                    center: (row0 + window / 2, col0 + window / 2),
                });
            }
        }
        Ok(Self {
            window,
            height,
            width,
            windows,
        })
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    /// Index of the tile owning pixel `(i, j)`.
    pub fn owner(&self, i: usize, j: usize) -> usize {
        let per_row = self.width.div_ceil(self.window);
        (i / self.window) * per_row + j / self.window
    }

    /// Shared key pool of tile `index` for frame `t`.
    pub fn psi(&self, index: usize, t: usize, flows: &FlowSet, r: usize, bounds: Bounds) -> Result<KeyCoordSet> {
        let win = &self.windows[index];
        let queries: Vec<_> = win.queries().collect();
        psi_for(&queries, win.center, t, self.window, flows, r, bounds)
    }
}
