//! Two-mode crossing benchmark.
//!
//! The ego walks along the x axis (either direction) at a fixed speed. After
//! the last observed frame it veers left or right with equal probability,
//! its lateral offset growing as `A (t / T)^2`. A pedestrian from the
//! opposite stream walks past it at its own speed. A share of windows has no
//! neighbor at all.
//! Every position gets independent Gaussian noise.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{normalize, Point, SceneWindow};
use crate::rng::{stream_key, NormalStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub t_past: usize,
    pub t_future: usize,
    /// Per-position noise standard deviation.
    pub noise: f64,
    /// Lateral offset of each mode at the final step.
    pub mode_offset: f64,
    /// Ego speed per frame. Kept fixed so the endpoint of each mode is
    /// predictable from the past up to the position noise.
    pub speed: f64,
    pub neighbor_speed_min: f64,
    pub neighbor_speed_max: f64,
    /// Fraction of windows with no neighbor at all.
    pub lone_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train: 200,
            test: 50,
            t_past: 8,
            t_future: 12,
            noise: 0.02,
            mode_offset: 0.1,
            speed: 0.1,
            neighbor_speed_min: 0.08,
            neighbor_speed_max: 0.12,
            lone_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Normalized window.
    pub window: SceneWindow,
    /// 0 = veers left of its heading, 1 = right.
    pub mode: usize,
    /// Noise-free final positions of both modes, normalized coordinates.
    pub mode_endpoints: [Point; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn train_windows(&self) -> Vec<SceneWindow> {
        self.train.iter().map(|s| s.window.clone()).collect()
    }

    pub fn test_windows(&self) -> Vec<SceneWindow> {
        self.test.iter().map(|s| s.window.clone()).collect()
    }
}

fn sample(
    cfg: &SyntheticConfig,
    split: &str,
    index: usize,
    rng: &mut NormalStream,
) -> SyntheticSample {
    let tp = cfg.t_past as i64;
    let tf = cfg.t_future as f64;
    let dir = if rng.next_uniform() < 0.5 { 1.0 } else { -1.0 };
    let speed = cfg.speed;
    let start = [
        4.0 * rng.next_uniform() - 2.0,
        4.0 * rng.next_uniform() - 2.0,
    ];
    let mode = rng.below(2);
    let side = if mode == 0 { 1.0 } else { -1.0 };
    // frame 0 is the last observed one
    let clean = |t: i64, s: f64| -> Point {
        let lateral = if t > 0 {
            s * cfg.mode_offset * (t as f64 / tf) * (t as f64 / tf)
        } else {
            0.0
        };
        // left of heading (dir, 0) is (0, dir)
        [start[0] + dir * speed * t as f64, start[1] + dir * lateral]
    };
    let frames: Vec<i64> = (1 - tp..=cfg.t_future as i64).collect();
    let noisy = |p: Point, rng: &mut NormalStream| -> Point {
        [
            p[0] + cfg.noise * rng.next_normal(),
            p[1] + cfg.noise * rng.next_normal(),
        ]
    };
    let ego: Vec<Point> = frames.iter().map(|&t| noisy(clean(t, side), rng)).collect();

    let lone = rng.next_uniform() < cfg.lone_fraction;
    let mut window = SceneWindow {
        scene: format!("synthetic-{split}"),
        ego_id: index as i64,
        start_frame: 0,
        ego_past: ego[..cfg.t_past].to_vec(),
        ego_future: ego[cfg.t_past..].to_vec(),
        neighbor_ids: Vec::new(),
        neighbor_pasts: Vec::new(),
        neighbor_futures: Vec::new(),
        neighbor_observed: Vec::new(),
        social_mask: Vec::new(),
        origin: [0.0, 0.0],
    };
    if !lone {
        // oncoming pedestrian meeting the ego a few frames into the future
        let meet = 2.0 + 6.0 * rng.next_uniform();
        let nspeed = cfg.neighbor_speed_min
            + (cfg.neighbor_speed_max - cfg.neighbor_speed_min) * rng.next_uniform();
        let gap =
            (0.3 + 0.3 * rng.next_uniform()) * if rng.next_uniform() < 0.5 { 1.0 } else { -1.0 };
        let meet_x = start[0] + dir * speed * meet;
        let nb: Vec<Point> = frames
            .iter()
            .map(|&t| {
                let p = [meet_x - dir * nspeed * (t as f64 - meet), start[1] + gap];
                noisy(p, rng)
            })
            .collect();
        window.neighbor_ids.push(1_000_000 + index as i64);
        window.neighbor_pasts.push(nb[..cfg.t_past].to_vec());
        window.neighbor_futures.push(nb[cfg.t_past..].to_vec());
        window
            .neighbor_observed
            .push(alloc::vec![true; frames.len()]);
        window.social_mask.push(true);
    }
    let window = normalize(&window);
    let end = cfg.t_future as i64;
    let shift = |p: Point| [p[0] - window.origin[0], p[1] - window.origin[1]];
    SyntheticSample {
        mode,
        mode_endpoints: [shift(clean(end, 1.0)), shift(clean(end, -1.0))],
        window,
    }
}

/// Deterministic in `config.seed`; train and test windows come from
/// disjoint random streams.
pub fn generate(config: &SyntheticConfig) -> SyntheticDataset {
    let make = |split: &str, tag: u64, n: usize| -> Vec<SyntheticSample> {
        (0..n)
            .map(|i| {
                let mut rng = NormalStream::new(config.seed, stream_key(&[0x5e, tag, i as u64]));
                sample(config, split, i, &mut rng)
            })
            .collect()
    };
    SyntheticDataset {
        config: config.clone(),
        train: make("train", 1, config.train),
        test: make("test", 2, config.test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_validity() {
        let d = generate(&SyntheticConfig::default());
        assert_eq!(d.train.len(), 200);
        assert_eq!(d.test.len(), 50);
        for s in d.train.iter().chain(&d.test) {
            s.window.validate(true).unwrap();
            assert_eq!(s.window.t_past(), 8);
            assert_eq!(s.window.t_future(), 12);
        }
        assert_eq!(d, generate(&SyntheticConfig::default()));
    }

    #[test]
    fn both_modes_occur_and_endpoints_differ_by_twice_the_offset() {
        let d = generate(&SyntheticConfig::default());
        let left = d.train.iter().filter(|s| s.mode == 0).count();
        assert!(left > 70 && left < 130, "{left}");
        for s in &d.train {
            let [a, b] = s.mode_endpoints;
            let gap = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((gap - 0.2).abs() < 1e-12);
            // the realized endpoint sits near its own mode
            let y = s.window.ego_future[11];
            let e = s.mode_endpoints[s.mode];
            assert!(((y[0] - e[0]).powi(2) + (y[1] - e[1]).powi(2)).sqrt() < 0.12);
        }
    }
}
