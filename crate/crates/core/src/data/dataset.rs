use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use super::synth::Track;
use super::wav::{load_wav, save_wav, WavFormat};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const MANIFEST: &str = "manifest.txt";
pub const MIXTURE: &str = "mixture";

/// Track counts the split proportions are taken from: 86 train, 14
/// validation, 50 test.
pub const REFERENCE_SPLIT: [usize; 3] = [86, 14, 50];
/// Desk-scale proportions (24/4/8).
pub const DESK_SPLIT: [usize; 3] = [24, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            _ => Err(Error::Validation(format!("unknown partition `{s}`"))),
        }
    }
}

/// Partition sizes for `n` items, proportional to `weights` by the
/// largest-remainder rule; every partition gets at least one item.
pub fn split_sizes(n: usize, weights: [usize; 3]) -> Result<[usize; 3]> {
    if n < 3 {
        return Err(Error::Validation(format!("need at least 3 tracks to split, got {n}")));
    }
    let total: usize = weights.iter().sum();
    if total == 0 || weights.contains(&0) {
        return Err(Error::config("split weights must be positive"));
    }
    let mut sizes = weights.map(|w| n * w / total);
    let mut rest: Vec<(usize, usize)> = (0..3).map(|i| (n * weights[i] % total, i)).collect();
    // larger remainder first, earlier partition on ties
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - sizes.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(short) {
        sizes[i] += 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("three partitions");
            sizes[donor] -= 1;
            sizes[i] = 1;
        }
    }
    Ok(sizes)
}

/// Seeded shuffle of `ids` cut into train/validation/test.
pub fn dataset_split(ids: &[String], seed: u64, weights: [usize; 3]) -> Result<IndexMap<String, Partition>> {
    let sizes = split_sizes(ids.len(), weights)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    RngStream::new(seed).shuffle(&mut order);
    let mut out = IndexMap::with_capacity(ids.len());
    let mut it = order.into_iter();
    for (p, size) in Partition::ALL.into_iter().zip(sizes) {
        for i in it.by_ref().take(size) {
            if out.insert(ids[i].clone(), p).is_some() {
                return Err(Error::Validation(format!("duplicate track id `{}`", ids[i])));
            }
        }
    }
    Ok(out)
}

/// A dataset directory: `<root>/<id>/{mixture,<source>...}.wav` plus a
/// manifest of `id<TAB>partition` lines.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: IndexMap<String, Partition>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = IndexMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, part) = line
                .split_once('\t')
                .ok_or_else(|| Error::Validation(format!("{}:{}: expected `id<TAB>partition`", path.display(), n + 1)))?;
            entries.insert(id.to_string(), part.trim().parse()?);
        }
        Ok(Dataset { root, entries })
    }

    /// Writes every track and the manifest.
    pub fn write(root: impl AsRef<Path>, tracks: &[Track], split: &IndexMap<String, Partition>, format: WavFormat) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        for t in tracks {
            let dir = root.join(&t.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_wav(&t.mixture, dir.join(format!("{MIXTURE}.wav")), format)?;
            for (name, w) in &t.sources {
                save_wav(w, dir.join(format!("{name}.wav")), format)?;
            }
        }
        let mut manifest = String::new();
        for t in tracks {
            let p = split
                .get(&t.id)
                .ok_or_else(|| Error::Validation(format!("track `{}` has no partition", t.id)))?;
            manifest.push_str(&format!("{}\t{p}\n", t.id));
        }
        let path = root.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Dataset::open(root)
    }

    pub fn ids(&self, partition: Partition) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, &p)| p == partition)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Loads one track; the stored mixture is kept as written.
    pub fn load_track(&self, id: &str, instruments: &[String]) -> Result<Track> {
        let dir = self.root.join(id);
        let mixture = load_wav(dir.join(format!("{MIXTURE}.wav")))?;
        let mut sources = IndexMap::new();
        for name in instruments {
            sources.insert(name.clone(), load_wav(dir.join(format!("{name}.wav")))?);
        }
        Ok(Track {
            id: id.to_string(),
            mixture,
            sources,
        })
    }

    pub fn load_partition(&self, partition: Partition, instruments: &[String]) -> Result<Vec<Track>> {
        self.ids(partition).iter().map(|id| self.load_track(id, instruments)).collect()
    }
}
