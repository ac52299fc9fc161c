//! Train/test splits: random within one camera stream, or across cameras or
//! winters.

use serde::{Deserialize, Serialize};

use super::frame::{FrameMeta, Framed};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    SameCamera,
    CrossCamera,
    CrossWinter,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_camera" => Ok(SplitMode::SameCamera),
            "cross_camera" => Ok(SplitMode::CrossCamera),
            "cross_winter" => Ok(SplitMode::CrossWinter),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

/// Frame filter; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default)]
    pub camera_id: Option<String>,
    #[serde(default)]
    pub winter_id: Option<String>,
}

impl Selector {
    pub fn camera(id: &str) -> Self {
        Self {
            camera_id: Some(id.into()),
            winter_id: None,
        }
    }

    pub fn winter(id: &str) -> Self {
        Self {
            camera_id: None,
            winter_id: Some(id.into()),
        }
    }

    pub fn matches(&self, meta: &FrameMeta) -> bool {
        self.camera_id.as_ref().is_none_or(|c| *c == meta.camera_id)
            && self.winter_id.as_ref().is_none_or(|w| *w == meta.winter_id)
    }

    fn describe(&self) -> String {
        format!(
            "camera_id={} winter_id={}",
            self.camera_id.as_deref().unwrap_or("*"),
            self.winter_id.as_deref().unwrap_or("*")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_selector: Selector,
    pub test_selector: Selector,
    /// Share of the filtered frames used for training (`same_camera` only).
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::SameCamera,
            train_selector: Selector::default(),
            test_selector: Selector::default(),
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::SameCamera => {
                if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "train_fraction must be in (0, 1), got {}",
                        self.train_fraction
                    )));
                }
            }
            SplitMode::CrossCamera => {
                let (a, b) = (&self.train_selector.camera_id, &self.test_selector.camera_id);
                if a.is_none() || b.is_none() || a == b {
                    return Err(Error::Config(
                        "cross_camera split needs two different camera_id filters".into(),
                    ));
                }
            }
            SplitMode::CrossWinter => {
                let (a, b) = (&self.train_selector.winter_id, &self.test_selector.winter_id);
                if a.is_none() || b.is_none() || a == b {
                    return Err(Error::Config(
                        "cross_winter split needs two different winter_id filters".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Number of training frames for a `same_camera` split, rounded half up.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction + 0.5).floor() as usize).min(n)
}

/// Splits frames into `(train, test)`, both in index order.
pub fn make_split<F: Framed + Clone>(frames: &[F], spec: &SplitSpec) -> Result<(Vec<F>, Vec<F>)> {
    spec.validate()?;
    let select = |sel: &Selector, which: &str| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..frames.len())
            .filter(|&i| sel.matches(frames[i].meta()))
            .collect();
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "{which} filter ({}) selects no frames",
                sel.describe()
            )));
        }
        Ok(idx)
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>();
    match spec.mode {
        SplitMode::SameCamera => {
            let pool = select(&spec.train_selector, "train")?;
            let n_train = train_count(pool.len(), spec.train_fraction);
            let mut order = pool.clone();
            SeedStream::new(spec.seed).shuffle(&mut order);
            let mut train: Vec<usize> = order[..n_train].to_vec();
            let mut test: Vec<usize> = order[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Ok((pick(&train), pick(&test)))
        }
        SplitMode::CrossCamera | SplitMode::CrossWinter => {
            let train = select(&spec.train_selector, "train")?;
            let test = select(&spec.test_selector, "test")?;
            Ok((pick(&train), pick(&test)))
        }
    }
}
