//! Labeled multimodal samples and their on-disk format.
//!
//! A dataset file is UTF-8 text, one JSON object per line. The first line is
//! the header:
//!
//! ```text
//! {"format_version":1,"num_modalities":2,"modality_names":["position","visual"],
//!  "modality_dims":[2,64],"num_beams":64,"num_antennas":16,"config_hash":"<sha256>",
//!  "split_ratios":[0.7,0.15,0.15],"position_frame":"...","scenario":{...}}
//! ```
//!
//! Every following line is one sample with exactly these fields, in order:
//! `sample_id`, `t`, `regime` (`"day"` | `"night"`), `label`, `x_pos`,
//! `x_vis`, `true_position`. Modalities beyond the second go in an optional
//! trailing `x_extra` array of arrays. Reals use shortest round-trip decimal
//! form. `scenario` may be `null` for data that did not come from the
//! built-in generator; channel-dependent metrics are then unavailable.
//!
//! Splits are not stored. A sample belongs to train, validation or test by
//! hashing its `sample_id` (see [`split_of`]) against `split_ratios`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array_channel::ChannelState;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scenario::{sample_channel, Regime, ScenarioConfig};
use crate::seed;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const SPLIT_SALT: u64 = 0x5EED_5B17_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Split of a sample: `u = top53(splitmix64(sample_id ^ salt)) / 2^53`, train
/// if `u < r_train`, val if `u < r_train + r_val`, test otherwise.
pub fn split_of(sample_id: u64, ratios: [f64; 3]) -> Split {
    let u = seed::unit_interval(seed::splitmix64(sample_id ^ SPLIT_SALT));
    if u < ratios[0] {
        Split::Train
    } else if u < ratios[0] + ratios[1] {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub num_modalities: usize,
    pub modality_names: Vec<String>,
    pub modality_dims: Vec<usize>,
    pub num_beams: usize,
    pub num_antennas: usize,
    pub config_hash: String,
    pub split_ratios: [f64; 3],
    pub position_frame: String,
    pub scenario: Option<ScenarioConfig>,
}

/// One time slot: the synchronized modality inputs and the optimal beam.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub t: u64,
    pub regime: Regime,
    pub label: usize,
    /// Modality inputs in modality index order: position, visual, extras.
    pub modalities: Vec<Vec<f64>>,
    /// Diagnostic only. Never used as a model input.
    pub true_position: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: u64,
    t: u64,
    regime: Regime,
    label: usize,
    x_pos: Vec<f64>,
    x_vis: Vec<f64>,
    true_position: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    x_extra: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, samples: Vec<Sample>) -> Result<Self> {
        if header.num_modalities < 2 {
            return Err(Error::domain("dataset needs position and visual modalities"));
        }
        if header.modality_dims.len() != header.num_modalities
            || header.modality_names.len() != header.num_modalities
        {
            return Err(Error::shape("header modality lists disagree with num_modalities"));
        }
        if header.num_beams == 0 {
            return Err(Error::domain("num_beams must be >= 1"));
        }
        for s in &samples {
            if s.label >= header.num_beams {
                return Err(Error::domain(format!(
                    "sample {} label {} outside [0, {})",
                    s.sample_id, s.label, header.num_beams
                )));
            }
            if s.modalities.len() != header.num_modalities {
                return Err(Error::shape(format!(
                    "sample {} has {} modalities, header declares {}",
                    s.sample_id,
                    s.modalities.len(),
                    header.num_modalities
                )));
            }
            for (d, (x, &dim)) in s.modalities.iter().zip(&header.modality_dims).enumerate() {
                if x.len() != dim {
                    return Err(Error::shape(format!(
                        "sample {} modality {d} has dim {}, header declares {dim}",
                        s.sample_id,
                        x.len()
                    )));
                }
            }
        }
        Ok(Self { header, samples })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality_dims(&self) -> &[usize] {
        &self.header.modality_dims
    }

    pub fn split(&self, sample: &Sample) -> Split {
        split_of(sample.sample_id, self.header.split_ratios)
    }

    /// Positions in `samples()` belonging to `split`, in sample order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.split(s) == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Regenerates the channel a generated sample was labeled with.
    pub fn channel(&self, sample: &Sample) -> Result<ChannelState> {
        let scenario = self.header.scenario.as_ref().ok_or_else(|| {
            Error::domain("dataset carries no scenario config; channels are unavailable")
        })?;
        sample_channel(scenario, sample.sample_id, sample.t, sample.true_position)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let to_io = |e: std::io::Error| Error::io("<stream>", e);
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(w, "{header}").map_err(to_io)?;
        for s in &self.samples {
            let record = SampleRecord {
                sample_id: s.sample_id,
                t: s.t,
                regime: s.regime,
                label: s.label,
                x_pos: s.modalities[0].clone(),
                x_vis: s.modalities[1].clone(),
                true_position: s.true_position,
                x_extra: s.modalities[2..].to_vec(),
            };
            let line = serde_json::to_string(&record).expect("sample serializes");
            writeln!(w, "{line}").map_err(to_io)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    /// Parses a dataset stream; `origin` names the source in diagnostics.
    pub fn read_from<R: BufRead>(r: R, origin: &Path) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(origin, "empty file, expected header line"))?
            .map_err(|e| Error::io(origin, e))?;
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported dataset format version {}", header.format_version),
            ));
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(origin, format!("line {}: {e}", lineno + 2)))?;
            let mut modalities = vec![rec.x_pos, rec.x_vis];
            modalities.extend(rec.x_extra);
            samples.push(Sample {
                sample_id: rec.sample_id,
                t: rec.t,
                regime: rec.regime,
                label: rec.label,
                modalities,
                true_position: rec.true_position,
            });
        }
        Dataset::new(header, samples).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        Self::read_from(bytes.as_slice(), path)
    }
}
