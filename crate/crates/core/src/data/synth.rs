//! Template-grammar dialogs over synthetic region features.
//!
//! Every image holds `k` distinct objects, each painted one color. Region `j`
//! is `object_proto[o] + color_proto[c] + noise`. Three question templates:
//!
//! - `what color is the {o}` -> `the {o} is {c}` (needs the image)
//! - `what color is it` -> `it is {c}`, where "it" is the object named by the
//!   most recent earlier round that established one (needs history and image)
//! - `is there a {o}` -> `yes there is` / `no there is not`

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dialog::{RawDialog, RawRound};
use super::features::FeatureStore;
use super::text::tokenize;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const TEMPLATE_WORDS: [&str; 13] = ["a", "picture", "of", "and", "what", "color", "is", "the", "it", "there", "yes", "no", "not"];

const OBJECTS: [&str; 30] = [
    "cat", "dog", "bus", "cup", "car", "tree", "bird", "ball", "boat", "chair", "lamp", "book", "kite", "horse", "train", "plate", "clock",
    "vase", "bench", "sheep", "cow", "bear", "pizza", "sink", "phone", "bowl", "shoe", "hat", "bag", "door",
];

const COLORS: [&str; 30] = [
    "red", "blue", "green", "white", "black", "yellow", "brown", "pink", "orange", "purple", "gray", "silver", "gold", "tan", "beige",
    "teal", "navy", "maroon", "olive", "cyan", "lime", "violet", "ivory", "coral", "plum", "khaki", "amber", "azure", "rust", "jade",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_dialogs: usize,
    /// Target vocabulary size including the four reserved tokens. Raised if
    /// too small to hold `k + 1` objects and two colors.
    pub vocab_size: usize,
    pub k: usize,
    pub n_candidates: usize,
    pub rounds: usize,
    pub d_img: usize,
    /// Half-width of the uniform per-entry feature noise.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_dialogs: usize, vocab_size: usize, k: usize, n_candidates: usize) -> Self {
        SynthConfig { seed, n_dialogs, vocab_size, k, n_candidates, rounds: 10, d_img: 16, noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub objects: Vec<String>,
    pub colors: Vec<String>,
    object_protos: Vec<Vec<f64>>,
    color_protos: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dialogs: Vec<RawDialog>,
    pub features: FeatureStore,
    pub world: SynthWorld,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Template {
    Color,
    It,
    Exists,
}

fn word_list(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| base.get(i).map_or_else(|| format!("{prefix}{i}"), |w| w.to_string())).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SynthWorld {
    fn sample(n_obj: usize, n_col: usize, d_img: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        // Every (object, color) sum must stay far from every other one, so
        // regions decode unambiguously despite the noise.
        let need = 4.0 * noise * (d_img as f64).sqrt();
        let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d_img).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        for _ in 0..1000 {
            let world = SynthWorld {
                objects: word_list(&OBJECTS, n_obj, "object"),
                colors: word_list(&COLORS, n_col, "color"),
                object_protos: draw(n_obj),
                color_protos: draw(n_col),
            };
            let combos: Vec<Vec<f64>> = (0..n_obj).flat_map(|o| (0..n_col).map(move |c| (o, c))).map(|(o, c)| world.region(o, c)).collect();
            let min = (0..combos.len())
                .flat_map(|i| (i + 1..combos.len()).map(move |j| (i, j)))
                .map(|(i, j)| dist2(&combos[i], &combos[j]))
                .fold(f64::INFINITY, f64::min);
            if min.sqrt() >= need {
                return Ok(world);
            }
        }
        Err(Error::Config(format!("cannot separate {n_obj}x{n_col} prototypes in {d_img} dimensions")))
    }

    fn region(&self, o: usize, c: usize) -> Vec<f64> {
        self.object_protos[o].iter().zip(&self.color_protos[c]).map(|(a, b)| a + b).collect()
    }

    /// Nearest (object, color) for each region column.
    pub fn decode_image(&self, features: &Tensor) -> Vec<(usize, usize)> {
        let (_, k) = features.dims2();
        (0..k)
            .map(|j| {
                let col = features.column_values(j);
                let mut best = (0, 0, f64::INFINITY);
                for o in 0..self.objects.len() {
                    for c in 0..self.colors.len() {
                        let d = dist2(&col, &self.region(o, c));
                        if d < best.2 {
                            best = (o, c, d);
                        }
                    }
                }
                (best.0, best.1)
            })
            .collect()
    }

    /// Answers a question the way the generator would, from the features and
    /// the earlier `(question, answer)` pairs alone.
    pub fn oracle_answer(&self, features: &Tensor, earlier: &[(&str, &str)], question: &str) -> Option<String> {
        let scene = self.decode_image(features);
        let color_of = |obj: &str| -> Option<&str> {
            let o = self.objects.iter().position(|x| x == obj)?;
            scene.iter().find(|(so, _)| *so == o).map(|&(_, c)| self.colors[c].as_str())
        };
        let q = tokenize(question);
        let q: Vec<&str> = q.iter().map(String::as_str).collect();
        match q.as_slice() {
            ["what", "color", "is", "it"] => {
                let referent = earlier.iter().rev().find_map(|(eq, ea)| {
                    let t = tokenize(eq);
                    match t.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
                        ["what", "color", "is", "the", o] => Some(o.to_string()),
                        ["is", "there", "a", o] if ea.starts_with("yes") => Some(o.to_string()),
                        _ => None,
                    }
                })?;
                Some(format!("it is {}", color_of(&referent)?))
            }
            ["what", "color", "is", "the", o] => Some(format!("the {o} is {}", color_of(o)?)),
            ["is", "there", "a", o] => Some(if color_of(o).is_some() { "yes there is" } else { "no there is not" }.to_string()),
            _ => None,
        }
    }
}

struct Draft {
    image_id: String,
    caption: String,
    rounds: Vec<(String, String, Template)>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_dialogs == 0 || cfg.k == 0 || cfg.n_candidates == 0 || cfg.rounds == 0 || cfg.d_img == 0 {
        return Err(Error::Config("synthetic dataset parameters must be positive".into()));
    }
    if cfg.rounds > super::dialog::MAX_ROUNDS || cfg.n_candidates > super::dialog::MAX_CANDIDATES {
        return Err(Error::Config("too many rounds or candidates".into()));
    }
    let budget = cfg.vocab_size.saturating_sub(4 + TEMPLATE_WORDS.len());
    let n_obj = (cfg.k + 1).max(budget.div_ceil(2));
    let n_col = 2usize.max(budget.saturating_sub(n_obj));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = SynthWorld::sample(n_obj, n_col, cfg.d_img, cfg.noise, &mut rng)?;

    let mut features = FeatureStore::new(cfg.d_img, cfg.k);
    let mut drafts = Vec::with_capacity(cfg.n_dialogs);
    for i in 0..cfg.n_dialogs {
        let image_id = format!("synth{i:05}");
        let mut objs: Vec<usize> = (0..n_obj).collect();
        objs.shuffle(&mut rng);
        objs.truncate(cfg.k);
        let cols: Vec<usize> = (0..cfg.k).map(|_| rng.gen_range(0..n_col)).collect();
        let mut values = vec![0.0; cfg.d_img * cfg.k];
        for j in 0..cfg.k {
            for (r, v) in world.region(objs[j], cols[j]).into_iter().enumerate() {
                values[r * cfg.k + j] = v + rng.gen_range(-cfg.noise..cfg.noise);
            }
        }
        features.insert(&image_id, Tensor::matrix(cfg.d_img, cfg.k, values)?)?;

        let mut mention: Vec<usize> = (0..cfg.k).collect();
        mention.shuffle(&mut rng);
        let caption =
            format!("a picture of {}", mention.iter().map(|&j| format!("a {}", world.objects[objs[j]])).collect::<Vec<_>>().join(" and "));

        let mut referent: Option<usize> = None; // region index
        let mut rounds = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            let u: f64 = rng.gen();
            let template = match referent {
                Some(_) if u < 0.3 => Template::It,
                Some(_) if u < 0.7 => Template::Color,
                None if u < 0.6 => Template::Color,
                _ => Template::Exists,
            };
            let (q, a) = match template {
                Template::Color => {
                    let j = rng.gen_range(0..cfg.k);
                    referent = Some(j);
                    let o = &world.objects[objs[j]];
                    (format!("what color is the {o}"), format!("the {o} is {}", world.colors[cols[j]]))
                }
                Template::It => {
                    let j = referent.expect("template requires a referent");
                    ("what color is it".to_string(), format!("it is {}", world.colors[cols[j]]))
                }
                Template::Exists => {
                    if rng.gen_bool(0.5) {
                        let j = rng.gen_range(0..cfg.k);
                        referent = Some(j);
                        (format!("is there a {}", world.objects[objs[j]]), "yes there is".to_string())
                    } else {
                        let absent: Vec<usize> = (0..n_obj).filter(|o| !objs.contains(o)).collect();
                        let o = absent[rng.gen_range(0..absent.len())];
                        (format!("is there a {}", world.objects[o]), "no there is not".to_string())
                    }
                }
            };
            rounds.push((q, a, template));
        }
        drafts.push(Draft { image_id, caption, rounds });
    }

    let mut by_template: [BTreeSet<String>; 3] = Default::default();
    for d in &drafts {
        for (_, a, t) in &d.rounds {
            by_template[*t as usize].insert(a.clone());
        }
    }
    let all: Vec<String> = by_template.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let by_template: Vec<Vec<String>> = by_template.into_iter().map(|s| s.into_iter().collect()).collect();

    let mut dialogs = Vec::with_capacity(drafts.len());
    for d in drafts {
        let mut rounds = Vec::with_capacity(d.rounds.len());
        for (question, answer, t) in d.rounds {
            let candidates = distractors(&answer, &by_template[t as usize], &all, cfg.n_candidates - 1, &world, &mut rng);
            let gt_index = rng.gen_range(0..cfg.n_candidates);
            let mut candidates = candidates;
            candidates.insert(gt_index, answer.clone());
            rounds.push(RawRound { question, answer, candidates, gt_index });
        }
        dialogs.push(RawDialog { image_id: d.image_id, caption: d.caption, rounds });
    }
    Ok(SynthData { dialogs, features, world })
}

/// Half from answers to the same template, the rest from all answers; all
/// distinct and different from `gt`. Falls back to unseen color answers only
/// when the observed pool runs dry.
fn distractors(gt: &str, same: &[String], all: &[String], n: usize, world: &SynthWorld, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut chosen: Vec<String> = Vec::with_capacity(n);
    let mut pick = |pool: &[String], want: usize, chosen: &mut Vec<String>| {
        let mut open: Vec<&String> = pool.iter().filter(|a| *a != gt && !chosen.contains(a)).collect();
        open.shuffle(rng);
        chosen.extend(open.into_iter().take(want).cloned());
    };
    pick(same, n / 2, &mut chosen);
    let rest = n - chosen.len();
    pick(all, rest, &mut chosen);
    let mut o = 0;
    while chosen.len() < n {
        let a = format!("the {} is {}", world.objects[o / world.colors.len()], world.colors[o % world.colors.len()]);
        if a != gt && !chosen.contains(&a) {
            chosen.push(a);
        }
        o += 1;
    }
    chosen.shuffle(rng);
    chosen
}

/// Last `ceil(n * val_fraction)` dialogs go to validation.
pub fn split_dialogs<T: Clone>(dialogs: &[T], val_fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_val = ((dialogs.len() as f64) * val_fraction).ceil() as usize;
    let n_val = n_val.min(dialogs.len());
    let cut = dialogs.len() - n_val;
    (dialogs[..cut].to_vec(), dialogs[cut..].to_vec())
}
