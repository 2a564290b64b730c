//! Trajectory records, prediction windows and scene splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_PAST: usize = 8;
pub const DEFAULT_FUTURE: usize = 12;
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.4;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: i64,
    pub ped: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    /// Leave-one-out group (e.g. `eth`, `hotel`); defaults to the name.
    pub group: String,
    /// Seconds between consecutive samples.
    pub frame_interval: f64,
    /// Sorted by `(frame, ped)`, unique per key.
    pub points: Vec<TrackPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Frame,
    Id,
    X,
    Y,
}

/// Position of each field in a whitespace separated line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnOrder(pub [Column; 4]);

impl Default for ColumnOrder {
    fn default() -> Self {
        Self([Column::Frame, Column::Id, Column::X, Column::Y])
    }
}

impl FromStr for ColumnOrder {
    type Err = Error;

    /// Parses e.g. `frame,id,x,y` or `frame,id,y,x`.
    fn from_str(s: &str) -> Result<Self> {
        let cols: Vec<Column> = s
            .split(',')
            .map(|c| match c.trim().to_ascii_lowercase().as_str() {
                "frame" | "f" => Ok(Column::Frame),
                "id" | "ped" | "pedestrian" => Ok(Column::Id),
                "x" => Ok(Column::X),
                "y" => Ok(Column::Y),
                other => Err(Error::Config(format!("unknown column `{other}`"))),
            })
            .collect::<Result<_>>()?;
        let all = [Column::Frame, Column::Id, Column::X, Column::Y];
        if cols.len() != 4 || !all.iter().all(|c| cols.contains(c)) {
            return Err(Error::Config(format!(
                "column order must be a permutation of frame,id,x,y: `{s}`"
            )));
        }
        Ok(Self([cols[0], cols[1], cols[2], cols[3]]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseReport {
    pub scene: Scene,
    /// 1-based line numbers that could not be parsed.
    pub malformed: Vec<usize>,
    pub warnings: Vec<String>,
}

fn parse_line(line: &str, order: &ColumnOrder) -> Option<TrackPoint> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 4 {
        return None;
    }
    let mut vals = [0.0f64; 4];
    for (v, t) in vals.iter_mut().zip(&toks) {
        *v = t.parse().ok()?;
        if !v.is_finite() {
            return None;
        }
    }
    let mut p = TrackPoint {
        frame: 0,
        ped: 0,
        x: 0.0,
        y: 0.0,
    };
    for (col, v) in order.0.iter().zip(vals) {
        match col {
            Column::Frame | Column::Id => {
                if v != math::trunc(v) {
                    return None;
                }
                if *col == Column::Frame {
                    p.frame = v as i64;
                } else {
                    p.ped = v as i64;
                }
            }
            Column::X => p.x = v,
            Column::Y => p.y = v,
        }
    }
    Some(p)
}

/// Parses one trajectory file's text. Blank lines and `#` comments are
/// skipped. More than 1% malformed lines is an error.
pub fn parse_scene(name: &str, text: &str, order: &ColumnOrder) -> Result<ParseReport> {
    let mut points = Vec::new();
    let mut malformed = Vec::new();
    let mut data_lines = 0usize;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        data_lines += 1;
        match parse_line(trimmed, order) {
            Some(p) => points.push(p),
            None => malformed.push(i + 1),
        }
    }
    if malformed.len() * 100 > data_lines {
        return Err(Error::Data(format!(
            "{name}: {} of {data_lines} lines malformed (lines {:?})",
            malformed.len(),
            malformed
        )));
    }
    points.sort_by(|a, b| (a.frame, a.ped).cmp(&(b.frame, b.ped)));
    let mut dedup: Vec<TrackPoint> = Vec::with_capacity(points.len());
    for p in points {
        if let Some(last) = dedup.last() {
            if last.frame == p.frame && last.ped == p.ped {
                if last.x != p.x || last.y != p.y {
                    return Err(Error::Data(format!(
                        "{name}: conflicting duplicate for frame {} pedestrian {}",
                        p.frame, p.ped
                    )));
                }
                continue;
            }
        }
        dedup.push(p);
    }
    let mut warnings = Vec::new();
    if dedup.is_empty() {
        warnings.push(format!("{name}: no trajectory points"));
    }
    if !malformed.is_empty() {
        warnings.push(format!("{name}: skipped malformed lines {malformed:?}"));
    }
    Ok(ParseReport {
        scene: Scene {
            name: name.to_string(),
            group: name.to_string(),
            frame_interval: DEFAULT_FRAME_INTERVAL,
            points: dedup,
        },
        malformed,
        warnings,
    })
}

/// A single prediction instance in the ego pedestrian's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub scene: String,
    pub ego_id: i64,
    /// Frame id of the first observed step.
    pub start_frame: i64,
    pub ego_past: Vec<Point>,
    pub ego_future: Vec<Point>,
    pub neighbor_ids: Vec<i64>,
    pub neighbor_pasts: Vec<Vec<Point>>,
    pub neighbor_futures: Vec<Vec<Point>>,
    /// Per neighbor, per frame (past then future): was the position observed
    /// or padded from the nearest observation.
    pub neighbor_observed: Vec<Vec<bool>>,
    /// Neighbor present at the final observed frame.
    pub social_mask: Vec<bool>,
    /// Offset subtracted from every coordinate.
    pub origin: Point,
}

/// Observed part of a window; the only input inference receives.
#[derive(Clone, Debug, PartialEq)]
pub struct PastWindow {
    pub ego_past: Vec<Point>,
    pub neighbor_pasts: Vec<Vec<Point>>,
    pub social_mask: Vec<bool>,
}

impl SceneWindow {
    pub fn t_past(&self) -> usize {
        self.ego_past.len()
    }

    pub fn t_future(&self) -> usize {
        self.ego_future.len()
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbor_pasts.len()
    }

    pub fn past(&self) -> PastWindow {
        PastWindow {
            ego_past: self.ego_past.clone(),
            neighbor_pasts: self.neighbor_pasts.clone(),
            social_mask: self.social_mask.clone(),
        }
    }

    fn shift(&mut self, d: Point) {
        let all = self
            .ego_past
            .iter_mut()
            .chain(self.ego_future.iter_mut())
            .chain(self.neighbor_pasts.iter_mut().flatten())
            .chain(self.neighbor_futures.iter_mut().flatten());
        for p in all {
            p[0] += d[0];
            p[1] += d[1];
        }
    }

    /// Checks the structural invariants; `normalized` additionally requires
    /// the last observed ego position to sit at the origin.
    pub fn validate(&self, normalized: bool) -> Result<()> {
        let n = self.neighbor_count();
        let tp = self.t_past();
        let tf = self.t_future();
        let bad = |m: &str| {
            Err(Error::Data(format!(
                "window {}/{}: {m}",
                self.scene, self.ego_id
            )))
        };
        if tp == 0 || tf == 0 {
            return bad("empty past or future");
        }
        if self.neighbor_futures.len() != n
            || self.neighbor_observed.len() != n
            || self.social_mask.len() != n
            || self.neighbor_ids.len() != n
        {
            return bad("neighbor arrays disagree in length");
        }
        for i in 0..n {
            if self.neighbor_pasts[i].len() != tp
                || self.neighbor_futures[i].len() != tf
                || self.neighbor_observed[i].len() != tp + tf
            {
                return bad("neighbor horizon mismatch");
            }
            if self.social_mask[i] && !self.neighbor_observed[i][tp - 1] {
                return bad("mask set for a neighbor absent at the last observed frame");
            }
        }
        let finite = self
            .ego_past
            .iter()
            .chain(&self.ego_future)
            .chain(self.neighbor_pasts.iter().flatten())
            .chain(self.neighbor_futures.iter().flatten())
            .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return bad("non-finite coordinate");
        }
        if normalized && self.ego_past[tp - 1] != [0.0, 0.0] {
            return bad("last observed ego position is not the origin");
        }
        Ok(())
    }
}

/// Shifts the window so the last observed ego position is the origin.
pub fn normalize(window: &SceneWindow) -> SceneWindow {
    let mut w = window.clone();
    let last = w.ego_past[w.t_past() - 1];
    if last != [0.0, 0.0] {
        w.shift([-last[0], -last[1]]);
        // exact zero regardless of rounding in the shift
        let tp = w.t_past();
        w.ego_past[tp - 1] = [0.0, 0.0];
        w.origin = [w.origin[0] + last[0], w.origin[1] + last[1]];
    }
    w
}

/// Inverse of [`normalize`].
pub fn denormalize(window: &SceneWindow) -> SceneWindow {
    let mut w = window.clone();
    let o = w.origin;
    w.shift(o);
    w.origin = [0.0, 0.0];
    w
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Smallest common spacing of the scene's distinct frame ids.
pub fn frame_step(scene: &Scene) -> i64 {
    let mut frames: Vec<i64> = scene.points.iter().map(|p| p.frame).collect();
    frames.dedup();
    let g = frames.windows(2).fold(0, |g, w| gcd(g, w[1] - w[0]));
    g.max(1)
}

type Tracks = BTreeMap<i64, BTreeMap<i64, Point>>;

fn tracks(scene: &Scene) -> Tracks {
    let mut t: Tracks = BTreeMap::new();
    for p in &scene.points {
        t.entry(p.ped).or_default().insert(p.frame, [p.x, p.y]);
    }
    t
}

/// Positions over `frames`, absent ones padded from the nearest earlier
/// observation (or the first later one for leading gaps).
fn padded(track: &BTreeMap<i64, Point>, frames: &[i64]) -> (Vec<Point>, Vec<bool>) {
    let observed: Vec<bool> = frames.iter().map(|f| track.contains_key(f)).collect();
    let first = frames
        .iter()
        .find_map(|f| track.get(f).copied())
        .unwrap_or([0.0, 0.0]);
    let mut last = first;
    let pos = frames
        .iter()
        .map(|f| {
            if let Some(&p) = track.get(f) {
                last = p;
            }
            last
        })
        .collect();
    (pos, observed)
}

/// One window per (pedestrian, start frame) where the pedestrian has
/// `t_past + t_future` consecutive samples. Start frames advance by
/// `stride` samples. Windows are raw (not normalized).
pub fn build_windows(
    scene: &Scene,
    t_past: usize,
    t_future: usize,
    stride: usize,
) -> Vec<SceneWindow> {
    let step = frame_step(scene);
    let tr = tracks(scene);
    let span = (t_past + t_future) as i64;
    let stride = stride.max(1) as i64;
    let mut out = Vec::new();
    for (&ego, track) in &tr {
        let Some((&first, _)) = track.iter().next() else {
            continue;
        };
        let Some((&last, _)) = track.iter().next_back() else {
            continue;
        };
        let mut start = first;
        while start + (span - 1) * step <= last {
            let frames: Vec<i64> = (0..span).map(|i| start + i * step).collect();
            if frames.iter().all(|f| track.contains_key(f)) {
                let ego_pos: Vec<Point> = frames.iter().map(|f| track[f]).collect();
                let past_frames = &frames[..t_past];
                let final_frame = frames[t_past - 1];
                let mut w = SceneWindow {
                    scene: scene.name.clone(),
                    ego_id: ego,
                    start_frame: start,
                    ego_past: ego_pos[..t_past].to_vec(),
                    ego_future: ego_pos[t_past..].to_vec(),
                    neighbor_ids: Vec::new(),
                    neighbor_pasts: Vec::new(),
                    neighbor_futures: Vec::new(),
                    neighbor_observed: Vec::new(),
                    social_mask: Vec::new(),
                    origin: [0.0, 0.0],
                };
                for (&other, otrack) in &tr {
                    if other == ego || !past_frames.iter().any(|f| otrack.contains_key(f)) {
                        continue;
                    }
                    let (pos, observed) = padded(otrack, &frames);
                    w.neighbor_ids.push(other);
                    w.neighbor_pasts.push(pos[..t_past].to_vec());
                    w.neighbor_futures.push(pos[t_past..].to_vec());
                    w.neighbor_observed.push(observed);
                    w.social_mask.push(otrack.contains_key(&final_frame));
                }
                out.push(w);
            }
            start += stride * step;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Holds out every scene of `held_out` as the test set; the remaining
/// scenes, in the given order, are split so the last `val_fraction` go to
/// validation.
pub fn split_leave_one_out(
    scenes: &[Scene],
    held_out: &str,
    val_fraction: f64,
) -> Result<SplitPlan> {
    let mut groups: Vec<String> = Vec::new();
    for s in scenes {
        if !groups.contains(&s.group) {
            groups.push(s.group.clone());
        }
    }
    if !groups.iter().any(|g| g == held_out) {
        return Err(Error::UnknownGroup {
            name: held_out.to_string(),
            available: groups,
        });
    }
    if groups.len() < 2 {
        return Err(Error::Data(format!(
            "holding out `{held_out}` leaves no scene group to train on"
        )));
    }
    let test: Vec<String> = scenes
        .iter()
        .filter(|s| s.group == held_out)
        .map(|s| s.name.clone())
        .collect();
    let rest: Vec<String> = scenes
        .iter()
        .filter(|s| s.group != held_out)
        .map(|s| s.name.clone())
        .collect();
    let n = rest.len();
    let mut n_val = libm::round(n as f64 * val_fraction) as usize;
    if val_fraction > 0.0 && n >= 2 && n_val == 0 {
        n_val = 1;
    }
    let n_val = n_val.min(n.saturating_sub(1));
    Ok(SplitPlan {
        train: rest[..n - n_val].to_vec(),
        validation: rest[n - n_val..].to_vec(),
        test,
    })
}

/// Windows stacked into fixed-size tensors, neighbors padded to the largest
/// count in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_neighbors: usize,
    pub t_past: usize,
    pub t_future: usize,
    /// `[B, t_past, 2]`
    pub ego_past: Tensor,
    /// `[B, t_future, 2]`; zeros for past-only batches.
    pub ego_future: Tensor,
    /// `[B, N, t_past, 2]`
    pub neighbor_past: Tensor,
    /// `[B, N, t_future, 2]`
    pub neighbor_future: Tensor,
    /// `[B, N]`, 1 where the social mask is set.
    pub mask: Tensor,
    pub has_future: bool,
}

fn flat(points: &[Point]) -> impl Iterator<Item = f64> + '_ {
    points.iter().flat_map(|p| p.iter().copied())
}

impl Batch {
    pub fn from_windows(windows: &[&SceneWindow]) -> Result<Self> {
        let pasts: Vec<PastWindow> = windows.iter().map(|w| w.past()).collect();
        let mut b = Self::from_pasts(&pasts.iter().collect::<Vec<_>>())?;
        let tf = windows.first().map_or(0, |w| w.t_future());
        let n = b.max_neighbors;
        let mut fut = Vec::with_capacity(windows.len() * tf * 2);
        let mut nfut = vec![0.0; windows.len() * n * tf * 2];
        for (i, w) in windows.iter().enumerate() {
            if w.t_future() != tf {
                return Err(Error::Horizon(tf, w.t_future()));
            }
            fut.extend(flat(&w.ego_future));
            for (j, nf) in w.neighbor_futures.iter().enumerate() {
                let base = ((i * n + j) * tf) * 2;
                for (k, v) in flat(nf).enumerate() {
                    nfut[base + k] = v;
                }
            }
        }
        b.t_future = tf;
        b.ego_future = Tensor::new(&[windows.len(), tf, 2], fut)?;
        b.neighbor_future = Tensor::new(&[windows.len(), n, tf, 2], nfut)?;
        b.has_future = true;
        Ok(b)
    }

    pub fn from_pasts(windows: &[&PastWindow]) -> Result<Self> {
        let size = windows.len();
        let tp = windows.first().map_or(0, |w| w.ego_past.len());
        let n = windows
            .iter()
            .map(|w| w.neighbor_pasts.len())
            .max()
            .unwrap_or(0);
        let mut past = Vec::with_capacity(size * tp * 2);
        let mut npast = vec![0.0; size * n * tp * 2];
        let mut mask = vec![0.0; size * n];
        for (i, w) in windows.iter().enumerate() {
            if w.ego_past.len() != tp {
                return Err(Error::Horizon(tp, w.ego_past.len()));
            }
            past.extend(flat(&w.ego_past));
            for (j, np) in w.neighbor_pasts.iter().enumerate() {
                if np.len() != tp {
                    return Err(Error::Horizon(tp, np.len()));
                }
                let base = ((i * n + j) * tp) * 2;
                for (k, v) in flat(np).enumerate() {
                    npast[base + k] = v;
                }
                mask[i * n + j] = if w.social_mask[j] { 1.0 } else { 0.0 };
            }
        }
        Ok(Self {
            size,
            max_neighbors: n,
            t_past: tp,
            t_future: 0,
            ego_past: Tensor::new(&[size, tp, 2], past)?,
            ego_future: Tensor::zeros(&[size, 0, 2]),
            neighbor_past: Tensor::new(&[size, n, tp, 2], npast)?,
            neighbor_future: Tensor::zeros(&[size, n, 0, 2]),
            mask: Tensor::new(&[size, n], mask)?,
            has_future: false,
        })
    }

    /// Per-step recurrent inputs `[B + B*N, 2]`: ego rows first, then each
    /// window's neighbor rows.
    pub fn agent_steps(&self, future: bool) -> Vec<Tensor> {
        let (ego, nbr, t) = if future {
            (&self.ego_future, &self.neighbor_future, self.t_future)
        } else {
            (&self.ego_past, &self.neighbor_past, self.t_past)
        };
        let rows = self.size + self.size * self.max_neighbors;
        (0..t)
            .map(|s| {
                let mut d = Vec::with_capacity(rows * 2);
                for i in 0..self.size {
                    d.extend_from_slice(&ego.data()[(i * t + s) * 2..(i * t + s) * 2 + 2]);
                }
                for r in 0..self.size * self.max_neighbors {
                    d.extend_from_slice(&nbr.data()[(r * t + s) * 2..(r * t + s) * 2 + 2]);
                }
                Tensor::new(&[rows, 2], d).expect("row count")
            })
            .collect()
    }

    /// Ground-truth futures flattened to `[B, t_future * 2]`.
    pub fn truth(&self) -> Tensor {
        self.ego_future
            .reshape(&[self.size, self.t_future * 2])
            .expect("same element count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(points: &[(i64, i64, f64, f64)]) -> Scene {
        let text: String = points
            .iter()
            .map(|(f, i, x, y)| format!("{f} {i} {x} {y}\n"))
            .collect();
        parse_scene("s", &text, &ColumnOrder::default())
            .unwrap()
            .scene
    }

    fn walker(id: i64, frames: core::ops::Range<i64>) -> Vec<(i64, i64, f64, f64)> {
        frames
            .map(|f| (f * 10, id, f as f64 * 0.5, id as f64))
            .collect()
    }

    #[test]
    fn parses_declared_column_order() {
        let r = parse_scene("s", "780 1 8.46 3.59\n", &ColumnOrder::default()).unwrap();
        assert_eq!(
            r.scene.points,
            vec![TrackPoint {
                frame: 780,
                ped: 1,
                x: 8.46,
                y: 3.59
            }]
        );
        let swapped: ColumnOrder = "frame,id,y,x".parse().unwrap();
        let r = parse_scene("s", "780\t1\t8.46\t3.59", &swapped).unwrap();
        assert_eq!((r.scene.points[0].x, r.scene.points[0].y), (3.59, 8.46));
    }

    #[test]
    fn empty_file_gives_empty_scene_with_warning() {
        let r = parse_scene("e", "", &ColumnOrder::default()).unwrap();
        assert!(r.scene.points.is_empty());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn duplicates_are_merged_or_rejected() {
        let ok = parse_scene("d", "1 1 0.5 0.5\n1 1 0.5 0.5\n", &ColumnOrder::default()).unwrap();
        assert_eq!(ok.scene.points.len(), 1);
        let err = parse_scene("d", "1 1 0.5 0.5\n1 1 0.6 0.5\n", &ColumnOrder::default());
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn too_many_malformed_lines_is_an_error() {
        let mut text = String::new();
        for i in 0..50 {
            text.push_str(&format!("{i} 1 0.0 0.0\n"));
        }
        text.push_str("garbage line\n");
        let err = parse_scene("m", &text, &ColumnOrder::default()).unwrap_err();
        assert!(format!("{err}").contains("51"));
        // one bad line in 200 is tolerated and reported
        for i in 50..200 {
            text.push_str(&format!("{i} 1 0.0 0.0\n"));
        }
        let r = parse_scene("m", &text, &ColumnOrder::default()).unwrap();
        assert_eq!(r.malformed, vec![51]);
    }

    #[test]
    fn bad_column_order_is_rejected() {
        assert!("frame,id,x".parse::<ColumnOrder>().is_err());
        assert!("frame,id,x,x".parse::<ColumnOrder>().is_err());
    }

    #[test]
    fn window_counts() {
        let s = scene(&walker(1, 0..20));
        let ws = build_windows(&s, 8, 12, 1);
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].neighbor_count(), 0);
        let s = scene(&walker(1, 0..21));
        assert_eq!(build_windows(&s, 8, 12, 1).len(), 2);
        let s = scene(&walker(1, 0..19));
        assert!(build_windows(&s, 8, 12, 1).is_empty());
    }

    #[test]
    fn co_present_pair_masks_each_other() {
        let mut pts = walker(1, 0..20);
        pts.extend(walker(2, 0..20));
        let ws = build_windows(&scene(&pts), 8, 12, 1);
        assert_eq!(ws.len(), 2);
        for w in &ws {
            assert_eq!(w.social_mask, vec![true]);
            w.validate(false).unwrap();
        }
    }

    #[test]
    fn neighbor_gaps_are_padded_and_flagged() {
        let mut pts = walker(1, 0..20);
        // neighbor seen at frames 2..5 only
        pts.extend(walker(2, 2..5));
        let ws = build_windows(&scene(&pts), 8, 12, 1);
        let w = &ws[0];
        assert_eq!(w.social_mask, vec![false]);
        let obs = &w.neighbor_observed[0];
        assert!(!obs[0] && obs[2] && obs[4] && !obs[5]);
        // leading gap takes the first observation, trailing gap the last one
        assert_eq!(w.neighbor_pasts[0][0], w.neighbor_pasts[0][2]);
        assert_eq!(w.neighbor_pasts[0][7], w.neighbor_pasts[0][4]);
        w.validate(false).unwrap();
    }

    #[test]
    fn normalize_moves_last_observation_to_origin() {
        let mut pts: Vec<_> = (0..20).map(|f| (f, 1, 5.0, 5.0 + f as f64 - 7.0)).collect();
        pts.extend((0..20).map(|f| (f, 2, 1.0, 1.0)));
        let w = build_windows(&scene(&pts), 8, 12, 1).remove(0);
        let n = normalize(&w);
        assert_eq!(n.ego_past[7], [0.0, 0.0]);
        assert_eq!(n.origin, [5.0, 5.0]);
        assert_eq!(n.neighbor_pasts[0][0], [-4.0, -4.0]);
        n.validate(true).unwrap();
        assert_eq!(normalize(&n), n);
    }

    #[test]
    fn leave_one_out() {
        let names = ["eth", "hotel", "univ", "zara1", "zara2"];
        let scenes: Vec<Scene> = names
            .iter()
            .map(|n| Scene {
                name: n.to_string(),
                group: n.to_string(),
                frame_interval: 0.4,
                points: Vec::new(),
            })
            .collect();
        let plan = split_leave_one_out(&scenes, "eth", 0.1).unwrap();
        assert_eq!(plan.test, vec!["eth".to_string()]);
        let mut rest: Vec<String> = plan.train.iter().chain(&plan.validation).cloned().collect();
        rest.sort();
        assert_eq!(rest, vec!["hotel", "univ", "zara1", "zara2"]);
        assert!(plan.train.iter().all(|t| !plan.validation.contains(t)));
        assert_eq!(plan, split_leave_one_out(&scenes, "eth", 0.1).unwrap());
        match split_leave_one_out(&scenes, "sdd", 0.1) {
            Err(Error::UnknownGroup { available, .. }) => assert_eq!(available.len(), 5),
            other => panic!("{other:?}"),
        }
        assert!(split_leave_one_out(&scenes[..1], "eth", 0.1).is_err());
    }

    #[test]
    fn batch_layout() {
        let mut pts = walker(1, 0..20);
        pts.extend(walker(2, 0..20));
        pts.extend(walker(3, 0..20));
        let ws: Vec<SceneWindow> = build_windows(&scene(&pts), 8, 12, 1)
            .iter()
            .map(normalize)
            .collect();
        let refs: Vec<&SceneWindow> = ws.iter().collect();
        let b = Batch::from_windows(&refs).unwrap();
        assert_eq!(b.max_neighbors, 2);
        let steps = b.agent_steps(false);
        assert_eq!(steps.len(), 8);
        assert_eq!(steps[0].shape(), &[3 + 3 * 2, 2]);
        // ego row of window 1 at the last observed step is its origin
        assert_eq!(steps[7].row(1), &[0.0, 0.0]);
        // first neighbor of window 0 is pedestrian 2, 1 unit above the ego
        assert_eq!(steps[7].row(3), &[0.0, 1.0]);
        assert_eq!(b.truth().shape(), &[3, 24]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // pedestrian -> set of sample indices (frame = 10 * index)
        fn tracks_strategy() -> impl Strategy<Value = Vec<Vec<bool>>> {
            proptest::collection::vec(proptest::collection::vec(proptest::bool::weighted(0.85), 40), 1..4)
        }

        fn build_scene(present: &[Vec<bool>], coords: &[(f64, f64)]) -> Scene {
            let mut pts = Vec::new();
            // pedestrian 0 is always seen at indices 0 and 1 so the frame step is 10
            for (p, row) in present.iter().enumerate() {
                for (i, &on) in row.iter().enumerate() {
                    if on || (p == 0 && i < 2) {
                        let (x, y) = coords[(p * 40 + i) % coords.len()];
                        pts.push((i as i64 * 10, p as i64, x, y));
                    }
                }
            }
            scene(&pts)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn window_count_matches_brute_force(
                present in tracks_strategy(),
                tp in 2usize..6,
                tf in 1usize..6,
                stride in 1usize..4,
            ) {
                let s = build_scene(&present, &[(0.0, 0.0), (1.0, 2.0)]);
                let span = tp + tf;
                let mut expected = 0;
                for (p, row) in present.iter().enumerate() {
                    let seen = |i: usize| row[i] || (p == 0 && i < 2);
                    let Some(first) = (0..40).find(|&i| seen(i)) else { continue };
                    for start in first..40 {
                        if (start - first) % stride == 0 && start + span <= 40 && (start..start + span).all(seen) {
                            expected += 1;
                        }
                    }
                }
                prop_assert_eq!(build_windows(&s, tp, tf, stride).len(), expected);
            }

            #[test]
            fn social_mask_is_symmetric(present in tracks_strategy()) {
                let s = build_scene(&present, &[(0.0, 0.0)]);
                let ws = build_windows(&s, 4, 3, 1);
                for a in &ws {
                    for b in &ws {
                        if a.ego_id == b.ego_id || a.start_frame != b.start_frame {
                            continue;
                        }
                        let ia = a.neighbor_ids.iter().position(|&i| i == b.ego_id).unwrap();
                        let ib = b.neighbor_ids.iter().position(|&i| i == a.ego_id).unwrap();
                        prop_assert_eq!(a.social_mask[ia], b.social_mask[ib]);
                        prop_assert!(a.social_mask[ia]);
                    }
                }
            }

            #[test]
            fn normalize_round_trips(
                present in tracks_strategy(),
                coords in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..200),
            ) {
                let s = build_scene(&present, &coords);
                for w in build_windows(&s, 4, 3, 2) {
                    let back = denormalize(&normalize(&w));
                    let pairs = w.ego_past.iter().chain(&w.ego_future).zip(back.ego_past.iter().chain(&back.ego_future));
                    let npairs = w.neighbor_pasts.iter().flatten().chain(w.neighbor_futures.iter().flatten())
                        .zip(back.neighbor_pasts.iter().flatten().chain(back.neighbor_futures.iter().flatten()));
                    for (p, q) in pairs.chain(npairs) {
                        prop_assert!((p[0] - q[0]).abs() <= 1e-12 && (p[1] - q[1]).abs() <= 1e-12);
                    }
                    prop_assert_eq!(&back.social_mask, &w.social_mask);
                }
            }
        }
    }
}
