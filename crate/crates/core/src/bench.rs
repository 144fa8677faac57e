//! Synthetic reasoning-segmentation benchmark: procedurally generated
//! moving-shape clips, queries that require inferring the target from
//! scene properties rather than naming it, per-instance ground-truth
//! tracklets, and rule-built multiple-choice questions.
//!
//! Everything is driven by one seeded RNG per episode, so a `(seed,
//! config)` pair always reproduces the same bytes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::VideoClip;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Frame rate stamped on generated clips.
pub const CLIP_FPS: f64 = 8.0;

/// Background gray; all palette values are dyadic rationals so an f32
/// round-trip through the clip file is exact.
pub const BACKGROUND: [f64; 3] = [0.0625, 0.0625, 0.0625];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Cyan,
    White,
}

impl ColorName {
    pub const ALL: [ColorName; 5] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Cyan,
        ColorName::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Cyan => "cyan",
            ColorName::White => "white",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorName::Red => [0.875, 0.125, 0.125],
            ColorName::Green => [0.125, 0.75, 0.125],
            ColorName::Blue => [0.125, 0.25, 0.875],
            ColorName::Cyan => [0.125, 0.8125, 0.8125],
            ColorName::White => [0.9375, 0.9375, 0.9375],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    Linear {
        start: (f64, f64),
        vel: (f64, f64),
    },
    Circular {
        center: (f64, f64),
        radius: f64,
        phase: f64,
        omega: f64,
    },
}

impl Trajectory {
    /// Center position at frame `t` as `(y, x)`.
    pub fn at(&self, t: usize) -> (f64, f64) {
        match *self {
            Trajectory::Linear { start, vel } => {
                (start.0 + vel.0 * t as f64, start.1 + vel.1 * t as f64)
            }
            Trajectory::Circular {
                center,
                radius,
                phase,
                omega,
            } => {
                let a = phase + omega * t as f64;
                (center.0 + radius * a.sin(), center.1 + radius * a.cos())
            }
        }
    }
}

/// One scene actor. `depth` orders occlusion: higher is painted on top.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub kind: ShapeKind,
    pub color: ColorName,
    /// Half extent in pixels (radius / half side / half height).
    pub size: usize,
    pub trajectory: Trajectory,
    pub depth: usize,
}

impl SceneInstance {
    /// Whether pixel `(y, x)` is covered at center `(cy, cx)`.
    fn covers(&self, cy: f64, cx: f64, y: usize, x: usize) -> bool {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let s = self.size as f64;
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= s * s,
            ShapeKind::Square => dy.abs() <= s && dx.abs() <= s,
            ShapeKind::Triangle => {
                let down = dy + s;
                down >= 0.0 && down <= 2.0 * s && dx.abs() <= down / 2.0
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub instances: Vec<SceneInstance>,
}

/// Generator knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub frames: usize,
    pub min_instances: usize,
    pub max_instances: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            canvas_h: 64,
            canvas_w: 64,
            frames: 8,
            min_instances: 2,
            max_instances: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::Config(format!(
                "generator needs at least 4 frames, got {}",
                self.frames
            )));
        }
        if !(2..=5).contains(&self.min_instances)
            || !(2..=5).contains(&self.max_instances)
            || self.min_instances > self.max_instances
        {
            return Err(Error::Config(format!(
                "instance range {}..={} outside 2..=5",
                self.min_instances, self.max_instances
            )));
        }
        if self.canvas_h < 32 || self.canvas_w < 32 {
            return Err(Error::Config(format!(
                "canvas {}x{} too small for the shape sizes",
                self.canvas_h, self.canvas_w
            )));
        }
        Ok(())
    }
}

/// The attributes of one instance as the multiple-choice options see them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub kind: ShapeKind,
    pub color: ColorName,
    pub size: usize,
}

/// One generated sample: clip, query, ground truth, and the MC question.
#[derive(Debug, Clone)]
pub struct QueryEpisode {
    pub id: String,
    pub clip: VideoClip,
    pub query: String,
    /// Indices into `instances` the query denotes.
    pub target_ids: Vec<usize>,
    pub instances: Vec<InstanceInfo>,
    /// Visible-region tracklet per instance (occlusion already resolved).
    pub tracklets: Vec<Vec<Mask>>,
    pub mc_question: String,
    pub mc_options: Vec<String>,
    pub mc_key: usize,
}

/// The query families. Edge queries pick the instance whose net motion
/// points dominantly at one canvas edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Largest,
    Smallest,
    Fastest,
    Slowest,
    Toward(Edge),
    NeverOverlaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Left, Edge::Right, Edge::Top, Edge::Bottom];

    fn word(self) -> &'static str {
        match self {
            Edge::Left => "left",
            Edge::Right => "right",
            Edge::Top => "top",
            Edge::Bottom => "bottom",
        }
    }
}

impl QueryKind {
    pub fn text(self) -> String {
        match self {
            QueryKind::Largest => "segment the largest shape".into(),
            QueryKind::Smallest => "segment the smallest shape".into(),
            QueryKind::Fastest => "segment the fastest moving object".into(),
            QueryKind::Slowest => "segment the slowest moving object".into(),
            QueryKind::Toward(e) => {
                format!("segment the object moving toward the {} edge", e.word())
            }
            QueryKind::NeverOverlaps => "segment the shape that never overlaps another".into(),
        }
    }
}

/// Derives an independent per-episode seed from the base seed, splitmix
/// style, so episodes can be generated in any order.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn paths(spec: &SceneSpec) -> Vec<Vec<(f64, f64)>> {
    spec.instances
        .iter()
        .map(|inst| (0..spec.frames).map(|t| inst.trajectory.at(t)).collect())
        .collect()
}

/// Full (unoccluded) shape mask per instance per frame.
fn full_masks(spec: &SceneSpec, paths: &[Vec<(f64, f64)>]) -> Vec<Vec<Mask>> {
    spec.instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            (0..spec.frames)
                .map(|t| {
                    let (cy, cx) = paths[i][t];
                    let mut m = Mask::empty(spec.h, spec.w);
                    for y in 0..spec.h {
                        for x in 0..spec.w {
                            if inst.covers(cy, cx, y, x) {
                                m.set(y, x, true);
                            }
                        }
                    }
                    m
                })
                .collect()
        })
        .collect()
}

/// Paints instances in ascending depth so later paint wins, producing the
/// clip and the exclusive visible-region tracklets.
fn render(spec: &SceneSpec, paths: &[Vec<(f64, f64)>]) -> Result<(Vec<f64>, Vec<Vec<Mask>>)> {
    let (h, w, t_frames) = (spec.h, spec.w, spec.frames);
    let mut pixels = Vec::with_capacity(t_frames * h * w * 3);
    let mut tracklets: Vec<Vec<Mask>> = spec
        .instances
        .iter()
        .map(|_| Vec::with_capacity(t_frames))
        .collect();
    let mut z_order: Vec<usize> = (0..spec.instances.len()).collect();
    z_order.sort_by_key(|&i| spec.instances[i].depth);
    for t in 0..t_frames {
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for &i in &z_order {
            let (cy, cx) = paths[i][t];
            let inst = &spec.instances[i];
            for y in 0..h {
                for x in 0..w {
                    if inst.covers(cy, cx, y, x) {
                        owner[y * w + x] = Some(i);
                    }
                }
            }
        }
        for (i, tr) in tracklets.iter_mut().enumerate() {
            let mut m = Mask::empty(h, w);
            for (cell, &o) in owner.iter().enumerate() {
                if o == Some(i) {
                    m.set(cell / w, cell % w, true);
                }
            }
            tr.push(m);
        }
        for &o in &owner {
            let rgb = match o {
                Some(i) => spec.instances[i].color.rgb(),
                None => BACKGROUND,
            };
            pixels.extend_from_slice(&rgb);
        }
    }
    Ok((pixels, tracklets))
}

/// Mean per-step travel distance of one path.
fn mean_speed(path: &[(f64, f64)]) -> f64 {
    if path.len() < 2 {
        return 0.0;
    }
    let total: f64 = path
        .windows(2)
        .map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt())
        .sum();
    total / (path.len() - 1) as f64
}

/// The edge an instance's net displacement points at, when dominant.
fn dominant_edge(path: &[(f64, f64)]) -> Option<Edge> {
    let first = path.first()?;
    let last = path.last()?;
    let dy = last.0 - first.0;
    let dx = last.1 - first.1;
    if dx.abs() > dy.abs() {
        Some(if dx < 0.0 { Edge::Left } else { Edge::Right })
    } else if dy.abs() > dx.abs() {
        Some(if dy < 0.0 { Edge::Top } else { Edge::Bottom })
    } else {
        None
    }
}

/// Instances satisfying a query over the scene.
pub fn evaluate_predicate(
    kind: QueryKind,
    spec: &SceneSpec,
    paths: &[Vec<(f64, f64)>],
    full: &[Vec<Mask>],
) -> Vec<usize> {
    let n = spec.instances.len();
    let argbest = |better: &dyn Fn(usize, usize) -> bool| -> Vec<usize> {
        let mut best = 0;
        for i in 1..n {
            if better(i, best) {
                best = i;
            }
        }
        vec![best]
    };
    match kind {
        QueryKind::Largest => {
            argbest(&|i, b| spec.instances[i].size > spec.instances[b].size)
        }
        QueryKind::Smallest => {
            argbest(&|i, b| spec.instances[i].size < spec.instances[b].size)
        }
        QueryKind::Fastest => argbest(&|i, b| mean_speed(&paths[i]) > mean_speed(&paths[b])),
        QueryKind::Slowest => argbest(&|i, b| mean_speed(&paths[i]) < mean_speed(&paths[b])),
        QueryKind::Toward(e) => (0..n)
            .filter(|&i| dominant_edge(&paths[i]) == Some(e) && mean_speed(&paths[i]) >= 0.25)
            .collect(),
        QueryKind::NeverOverlaps => (0..n)
            .filter(|&i| {
                (0..n).all(|j| {
                    j == i
                        || (0..spec.frames).all(|t| {
                            let (inter, _) = full[i][t].overlap(&full[j][t]);
                            inter == 0
                        })
                })
            })
            .collect(),
    }
}

/// Queries that denote exactly one instance in this scene.
fn available_queries(
    spec: &SceneSpec,
    paths: &[Vec<(f64, f64)>],
    full: &[Vec<Mask>],
) -> Vec<(QueryKind, usize)> {
    let mut kinds = vec![
        QueryKind::Largest,
        QueryKind::Smallest,
        QueryKind::Fastest,
        QueryKind::Slowest,
    ];
    kinds.extend(Edge::ALL.iter().map(|&e| QueryKind::Toward(e)));
    kinds.push(QueryKind::NeverOverlaps);
    kinds
        .into_iter()
        .filter_map(|k| {
            let hits = evaluate_predicate(k, spec, paths, full);
            (hits.len() == 1).then(|| (k, hits[0]))
        })
        .collect()
}

fn sample_scene(rng: &mut ChaCha12Rng, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    let n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut colors = ColorName::ALL.to_vec();
    colors.shuffle(rng);
    let mut sizes = [5usize, 7, 9, 11, 13].to_vec();
    sizes.shuffle(rng);
    let mut speeds = [0.5f64, 1.0, 1.5, 2.0, 2.5].to_vec();
    speeds.shuffle(rng);
    let mut depths: Vec<usize> = (0..n).collect();
    depths.shuffle(rng);

    let last = (cfg.frames - 1) as f64;
    let mut instances: Vec<SceneInstance> = Vec::with_capacity(n);
    for i in 0..n {
        let kind = *ShapeKind::ALL
            .get(rng.gen_range(0..ShapeKind::ALL.len()))
            .expect("nonempty");
        let size = sizes[i];
        let speed = speeds[i];
        let s = size as f64 + 1.0;
        let mut placed = false;
        for _ in 0..200 {
            let circular = rng.gen_bool(0.3);
            let trajectory = if circular {
                let radius = rng.gen_range(4.0..8.0);
                let lo_y = s + radius;
                let hi_y = cfg.canvas_h as f64 - 1.0 - s - radius;
                let lo_x = s + radius;
                let hi_x = cfg.canvas_w as f64 - 1.0 - s - radius;
                if lo_y >= hi_y || lo_x >= hi_x {
                    continue;
                }
                Trajectory::Circular {
                    center: (rng.gen_range(lo_y..hi_y), rng.gen_range(lo_x..hi_x)),
                    radius,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    omega: speed / radius * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                }
            } else {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let vel = (speed * angle.sin(), speed * angle.cos());
                // Start must keep both endpoints inside the canvas.
                let y_min = s - (vel.0 * last).min(0.0);
                let y_max = cfg.canvas_h as f64 - 1.0 - s - (vel.0 * last).max(0.0);
                let x_min = s - (vel.1 * last).min(0.0);
                let x_max = cfg.canvas_w as f64 - 1.0 - s - (vel.1 * last).max(0.0);
                if y_min >= y_max || x_min >= x_max {
                    continue;
                }
                Trajectory::Linear {
                    start: (rng.gen_range(y_min..y_max), rng.gen_range(x_min..x_max)),
                    vel,
                }
            };
            let p0 = trajectory.at(0);
            let clear = instances.iter().all(|other| {
                let q0 = other.trajectory.at(0);
                let d = ((p0.0 - q0.0).powi(2) + (p0.1 - q0.1).powi(2)).sqrt();
                d >= (size + other.size) as f64 - 2.0
            });
            if clear {
                instances.push(SceneInstance {
                    kind,
                    color: colors[i],
                    size,
                    trajectory,
                    depth: depths[i],
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place instance {i} after 200 attempts"
            )));
        }
    }
    Ok(SceneSpec {
        h: cfg.canvas_h,
        w: cfg.canvas_w,
        frames: cfg.frames,
        instances,
    })
}

fn option_text(color: ColorName, kind: ShapeKind) -> String {
    format!("the {} {}", color.word(), kind.word())
}

/// Builds options around the target: distractors prefer attribute pairs of
/// other scene instances, then plausible combinations; all have the form
/// "the <color> <kind>" so lengths stay within 5 characters of each other.
fn build_mc(
    rng: &mut ChaCha12Rng,
    instances: &[InstanceInfo],
    target: usize,
) -> (Vec<String>, usize) {
    let n_options = rng.gen_range(3..=5);
    let key_pair = (instances[target].color, instances[target].kind);
    let mut pairs = vec![key_pair];
    for (i, inst) in instances.iter().enumerate() {
        if i != target && pairs.len() < n_options && !pairs.contains(&(inst.color, inst.kind)) {
            pairs.push((inst.color, inst.kind));
        }
    }
    let mut fillers: Vec<(ColorName, ShapeKind)> = ColorName::ALL
        .iter()
        .flat_map(|&c| ShapeKind::ALL.iter().map(move |&k| (c, k)))
        .filter(|p| !pairs.contains(p))
        .collect();
    fillers.shuffle(rng);
    while pairs.len() < n_options {
        pairs.push(fillers.pop().expect("15 combinations always suffice"));
    }
    pairs.shuffle(rng);
    let key = pairs.iter().position(|&p| p == key_pair).expect("key kept");
    let options = pairs.into_iter().map(|(c, k)| option_text(c, k)).collect();
    (options, key)
}

/// One scene draw: `None` when the scene admits no single-target query.
fn propose_scene(
    rng: &mut ChaCha12Rng,
    cfg: &GeneratorConfig,
) -> Result<Option<(SceneSpec, QueryKind, usize)>> {
    let spec = match sample_scene(rng, cfg) {
        Ok(s) => s,
        Err(_) => return Ok(None),
    };
    let paths = paths(&spec);
    let full = full_masks(&spec, &paths);
    let queries = available_queries(&spec, &paths, &full);
    if queries.is_empty() {
        return Ok(None);
    }
    let (kind, target) = queries[rng.gen_range(0..queries.len())];
    Ok(Some((spec, kind, target)))
}

/// Generates one episode. Scenes that admit no single-target query are
/// resampled a bounded number of times.
pub fn generate_episode(seed: u64, id: &str, cfg: &GeneratorConfig) -> Result<QueryEpisode> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let Some((spec, kind, target)) = propose_scene(&mut rng, cfg)? else {
            continue;
        };
        let paths = paths(&spec);
        let (pixels, tracklets) = render(&spec, &paths)?;
        let clip = VideoClip::new(id, spec.frames, spec.h, spec.w, CLIP_FPS, pixels)?;
        let instances: Vec<InstanceInfo> = spec
            .instances
            .iter()
            .map(|i| InstanceInfo {
                kind: i.kind,
                color: i.color,
                size: i.size,
            })
            .collect();
        let (mc_options, mc_key) = build_mc(&mut rng, &instances, target);
        let query = kind.text();
        return Ok(QueryEpisode {
            id: id.to_string(),
            clip,
            mc_question: query.clone(),
            query,
            target_ids: vec![target],
            instances,
            tracklets,
            mc_options,
            mc_key,
        });
    }
    Err(Error::Generation(format!(
        "no scene with a unique-target query after 50 attempts (seed {seed})"
    )))
}

/// Episode ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Splits ids by a seeded shuffle: train and val take the floor of their
/// share, the remainder goes to test. Errors when a positive-ratio split
/// would come out empty.
pub fn split_dataset(ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<SplitLists> {
    let (rt, rv, rs) = ratios;
    for r in [rt, rv, rs] {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::Config(format!("split ratio {r} must be >= 0")));
        }
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios sum to {}, expected 1",
            rt + rv + rs
        )));
    }
    let positive = [rt, rv, rs].iter().filter(|&&r| r > 0.0).count();
    if ids.len() < positive {
        return Err(Error::Config(format!(
            "{} episodes cannot fill {positive} splits",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_train = (n as f64 * rt).floor() as usize;
    let n_val = (n as f64 * rv).floor() as usize;
    let test: Vec<String> = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    let lists = SplitLists {
        train: shuffled,
        val,
        test,
    };
    for (name, ratio, len) in [
        ("train", rt, lists.train.len()),
        ("val", rv, lists.val.len()),
        ("test", rs, lists.test.len()),
    ] {
        if ratio > 0.0 && len == 0 {
            return Err(Error::Config(format!(
                "split {name} has ratio {ratio} but received no episodes"
            )));
        }
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn same_seed_reproduces_the_episode_byte_for_byte() {
        let a = generate_episode(7, "ep0", &cfg()).unwrap();
        let b = generate_episode(7, "ep0", &cfg()).unwrap();
        assert_eq!(a.clip.data(), b.clip.data());
        assert_eq!(a.query, b.query);
        assert_eq!(a.target_ids, b.target_ids);
        assert_eq!(a.tracklets, b.tracklets);
        assert_eq!(a.mc_options, b.mc_options);
        assert_eq!(a.mc_key, b.mc_key);
    }

    #[test]
    fn options_are_bounded_balanced_and_keyed_to_the_target() {
        for seed in 0..20u64 {
            let ep = generate_episode(seed, "e", &cfg()).unwrap();
            assert!((3..=5).contains(&ep.mc_options.len()), "seed {seed}");
            assert!(ep.mc_key < ep.mc_options.len());
            let lens: Vec<usize> = ep.mc_options.iter().map(|o| o.len()).collect();
            let spread = lens.iter().max().unwrap() - lens.iter().min().unwrap();
            assert!(spread <= 5, "seed {seed}: option length spread {spread}");
            // The key option names the target's attributes.
            let target = &ep.instances[ep.target_ids[0]];
            assert_eq!(
                ep.mc_options[ep.mc_key],
                option_text(target.color, target.kind)
            );
            // Options are unique.
            let mut sorted = ep.mc_options.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), ep.mc_options.len());
        }
    }

    #[test]
    fn occlusion_is_exclusive_and_targets_stay_visible() {
        for seed in 0..10u64 {
            let ep = generate_episode(seed, "e", &cfg()).unwrap();
            let t_frames = ep.clip.frames;
            for t in 0..t_frames {
                for cell in 0..ep.clip.height * ep.clip.width {
                    let covered: usize = ep
                        .tracklets
                        .iter()
                        .map(|tr| tr[t].data()[cell] as usize)
                        .sum();
                    assert!(covered <= 1, "seed {seed}: pixel owned twice");
                }
            }
            let target = ep.target_ids[0];
            let visible: usize = ep.tracklets[target].iter().map(|m| m.count()).sum();
            assert!(visible > 0, "seed {seed}: target fully occluded");
        }
    }

    /// Per-pixel topmost-instance query, structured unlike the painter.
    fn rerender_oracle(spec: &SceneSpec) -> Vec<Vec<Mask>> {
        let paths = paths(spec);
        let mut by_depth: Vec<usize> = (0..spec.instances.len()).collect();
        by_depth.sort_by_key(|&i| std::cmp::Reverse(spec.instances[i].depth));
        (0..spec.instances.len())
            .map(|i| {
                (0..spec.frames)
                    .map(|t| {
                        let mut m = Mask::empty(spec.h, spec.w);
                        for y in 0..spec.h {
                            for x in 0..spec.w {
                                let top = by_depth.iter().copied().find(|&j| {
                                    let (cy, cx) = paths[j][t];
                                    spec.instances[j].covers(cy, cx, y, x)
                                });
                                if top == Some(i) {
                                    m.set(y, x, true);
                                }
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn tracklets_match_an_independent_rasterization() {
        for seed in [3u64, 11, 29] {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let spec = sample_scene(&mut rng, &cfg()).unwrap();
            let p = paths(&spec);
            let (_, tracklets) = render(&spec, &p).unwrap();
            assert_eq!(tracklets, rerender_oracle(&spec), "seed {seed}");
        }
    }

    #[test]
    fn chosen_queries_reselect_exactly_their_target() {
        let mut found = 0;
        for seed in 0..30u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let Some((spec, kind, target)) = propose_scene(&mut rng, &cfg()).unwrap() else {
                continue;
            };
            let p = paths(&spec);
            let full = full_masks(&spec, &p);
            assert_eq!(
                evaluate_predicate(kind, &spec, &p, &full),
                vec![target],
                "seed {seed}: {:?}",
                kind
            );
            found += 1;
        }
        assert!(found >= 10, "only {found} scenes admitted a query");
    }

    #[test]
    fn query_and_answer_words_stay_in_the_lexicon() {
        let vocab = crate::responder::Vocab::build(4).unwrap();
        let mut kinds = vec![
            QueryKind::Largest,
            QueryKind::Smallest,
            QueryKind::Fastest,
            QueryKind::Slowest,
            QueryKind::NeverOverlaps,
        ];
        kinds.extend(Edge::ALL.iter().map(|&e| QueryKind::Toward(e)));
        for kind in kinds {
            for word in kind.text().split_whitespace() {
                assert!(vocab.id(word).is_ok(), "{word} missing from lexicon");
            }
        }
        for c in ColorName::ALL {
            assert!(vocab.id(c.word()).is_ok());
        }
        for k in ShapeKind::ALL {
            assert!(vocab.id(k.word()).is_ok());
        }
        for word in ["is", "the"] {
            assert!(vocab.id(word).is_ok());
        }
    }

    #[test]
    fn paper_ratio_splits_round_as_documented() {
        let ids = |n: usize| -> Vec<String> { (0..n).map(|i| format!("ep{i:04}")).collect() };
        let s = split_dataset(&ids(20), (0.52, 0.21, 0.27), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 4, 6));
        let s = split_dataset(&ids(100), (0.52, 0.21, 0.27), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (52, 21, 27));

        let s = split_dataset(&ids(5), (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 0, 0));

        assert!(split_dataset(&ids(2), (0.52, 0.21, 0.27), 0).is_err());
        assert!(split_dataset(&ids(10), (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn splits_partition_the_ids() {
        let ids: Vec<String> = (0..37).map(|i| format!("ep{i:04}")).collect();
        let s = split_dataset(&ids, (0.52, 0.21, 0.27), 123).unwrap();
        let mut all: Vec<String> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .cloned()
            .collect();
        assert_eq!(all.len(), 37);
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want, "disjoint and covering");
        // Same seed, same split.
        assert_eq!(s, split_dataset(&ids, (0.52, 0.21, 0.27), 123).unwrap());
    }

    #[test]
    fn episode_seeds_spread() {
        let a = episode_seed(0, 0);
        let b = episode_seed(0, 1);
        let c = episode_seed(1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn clip_colors_come_from_the_palette() {
        let ep = generate_episode(5, "e", &cfg()).unwrap();
        let mut allowed: Vec<[f64; 3]> = ColorName::ALL.iter().map(|c| c.rgb()).collect();
        allowed.push(BACKGROUND);
        let data = ep.clip.data();
        for px in data.chunks(3) {
            assert!(
                allowed.iter().any(|c| c[0] == px[0] && c[1] == px[1] && c[2] == px[2]),
                "pixel {px:?} not in palette"
            );
        }
        // Palette survives an f32 round-trip exactly.
        for v in data {
            assert_eq!(*v, *v as f32 as f64);
        }
    }
}
