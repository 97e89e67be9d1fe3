//! Bounding-box and foreground-point prompts sampled from a slice mask.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of foreground points per prompt.
pub const PROMPT_POINTS: usize = 5;

/// Prompts for one slice. Coordinates are `(x, y)` with `x` the column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    /// Inclusive `(x0, y0, x1, y1)`.
    pub bbox: [usize; 4],
    pub points: Vec<[usize; 2]>,
    pub seed: u64,
}

impl PromptSet {
    pub fn bbox_contains(&self, x: usize, y: usize) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
    }
}

/// Tight bounding box of the true pixels plus [`PROMPT_POINTS`] of them drawn
/// uniformly — without replacement unless the mask has fewer pixels than that.
pub fn make_prompts(mask: &[bool], h: usize, w: usize, seed: u64) -> Result<PromptSet> {
    if mask.len() != h * w {
        return Err(Error::shape("make_prompts", &[mask.len()], &[h, w]));
    }
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if fg.is_empty() {
        return Err(Error::Empty("prompt mask has no foreground pixel".into()));
    }
    let mut bbox = [usize::MAX, usize::MAX, 0, 0];
    for &i in &fg {
        let (y, x) = (i / w, i % w);
        bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x), bbox[3].max(y)];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if fg.len() >= PROMPT_POINTS {
        index::sample(&mut rng, fg.len(), PROMPT_POINTS).into_vec()
    } else {
        (0..PROMPT_POINTS).map(|_| rng.random_range(0..fg.len())).collect()
    };
    let points = picks.into_iter().map(|k| [fg[k] % w, fg[k] / w]).collect();
    Ok(PromptSet { bbox, points, seed })
}
