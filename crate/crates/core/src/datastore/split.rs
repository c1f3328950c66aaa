//! Recording-level dev/test splits and stratified label subsets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::frames::FrameSet;
use crate::error::{Error, Result};
use crate::sigsynth::{Modulation, RecordingMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    #[default]
    Recording,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dev_fraction: f64,
    pub label_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub unit: SplitUnit,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            dev_fraction: 0.8,
            label_ratio: 1.0,
            seed: 0,
            unit: SplitUnit::Recording,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::config(format!(
                "dev_fraction {} outside (0, 1)",
                self.dev_fraction
            )));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::config(format!(
                "label_ratio {} outside (0, 1]",
                self.label_ratio
            )));
        }
        Ok(())
    }
}

/// Recording ids per partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub labeled: Vec<usize>,
}

impl Splits {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that dev and test share no recording and labeled ⊆ dev.
    pub fn check_leak_free(&self) -> Result<()> {
        let dev: std::collections::BTreeSet<_> = self.dev.iter().collect();
        if let Some(id) = self.test.iter().find(|id| dev.contains(id)) {
            return Err(Error::data(format!("recording {id} is in both dev and test")));
        }
        if let Some(id) = self.labeled.iter().find(|id| !dev.contains(id)) {
            return Err(Error::data(format!("labeled recording {id} is not in dev")));
        }
        Ok(())
    }
}

/// Stratum of a recording: modulation and angle cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stratum {
    pub modulation: Modulation,
    azimuth_mdeg: i64,
    elevation_mdeg: i64,
}

impl Stratum {
    pub fn new(modulation: Modulation, azimuth_deg: f64, elevation_deg: f64) -> Self {
        Stratum {
            modulation,
            azimuth_mdeg: (azimuth_deg * 1000.0).round() as i64,
            elevation_mdeg: (elevation_deg * 1000.0).round() as i64,
        }
    }

    pub fn of(meta: &RecordingMeta) -> Self {
        Stratum::new(meta.modulation, meta.azimuth_deg, meta.elevation_deg)
    }
}

/// Orders `items` so that every prefix is as balanced as possible: first
/// across modulations, then across angle cells within a modulation. Order
/// inside a stratum and among cells is shuffled by `seed`.
pub fn stratified_order(strata: &[Stratum], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        cells.entry(*s).or_default().push(i);
    }
    // Per modulation: cells in shuffled order, members shuffled.
    let mut by_mod: BTreeMap<Modulation, Vec<Vec<usize>>> = BTreeMap::new();
    for (s, mut members) in cells {
        members.shuffle(&mut rng);
        by_mod.entry(s.modulation).or_default().push(members);
    }
    // Each modulation yields a stream: round r takes the r-th member of every
    // cell. Streams are then interleaved one element at a time.
    let mut streams: Vec<Vec<usize>> = by_mod
        .into_values()
        .map(|mut cells| {
            cells.shuffle(&mut rng);
            let depth = cells.iter().map(Vec::len).max().unwrap_or(0);
            let mut out = Vec::new();
            for r in 0..depth {
                out.extend(cells.iter().filter_map(|c| c.get(r)));
            }
            out
        })
        .collect();
    streams.shuffle(&mut rng);
    let depth = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(strata.len());
    for r in 0..depth {
        order.extend(streams.iter().filter_map(|s| s.get(r)));
    }
    order
}

/// Partitions recordings into dev and test, then draws the labeled subset
/// of dev. Both draws are stratified by modulation and angle cell.
pub fn make_splits(metas: &[RecordingMeta], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if metas.is_empty() {
        return Err(Error::data("cannot split an empty manifest"));
    }
    let n = metas.len();
    let strata: Vec<Stratum> = metas.iter().map(Stratum::of).collect();
    let order = stratified_order(&strata, spec.seed);
    let n_test = ((n as f64) * (1.0 - spec.dev_fraction)).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::data(format!(
            "dev_fraction {} leaves an empty partition for {n} recordings",
            spec.dev_fraction
        )));
    }
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut dev: Vec<usize> = order[n_test..].to_vec();

    let dev_strata: Vec<Stratum> = dev.iter().map(|&i| strata[i]).collect();
    let dev_order = stratified_order(&dev_strata, spec.seed.wrapping_add(1));
    let n_lab = ((dev.len() as f64) * spec.label_ratio).round() as usize;
    if n_lab == 0 {
        let min = (1.0 / (spec.label_ratio * spec.dev_fraction)).ceil();
        return Err(Error::data(format!(
            "label_ratio {} selects no recordings from {} dev recordings; need at least {min} recordings",
            spec.label_ratio,
            dev.len()
        )));
    }
    let mut labeled: Vec<usize> = dev_order[..n_lab].iter().map(|&k| dev[k]).collect();
    dev.sort_unstable();
    test.sort_unstable();
    labeled.sort_unstable();
    Ok(Splits { dev, test, labeled })
}

/// Stratified subset of `ceil(ratio · len)` frames, for label budgets finer
/// than whole recordings.
pub fn stratified_frame_subset(frames: &FrameSet, ratio: f64, seed: u64) -> Result<FrameSet> {
    Ok(frames.subset(&stratified_frame_indices(frames, ratio, seed)?))
}

/// Sorted positions of the frames [`stratified_frame_subset`] keeps.
pub fn stratified_frame_indices(frames: &FrameSet, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("label ratio {ratio} outside (0, 1]")));
    }
    if frames.is_empty() {
        return Err(Error::data("cannot subsample an empty frame set"));
    }
    let strata: Vec<Stratum> = (0..frames.len())
        .map(|i| {
            let l = frames.labels(i);
            Stratum::new(l.modulation, l.azimuth_deg, l.elevation_deg)
        })
        .collect();
    let k = ((frames.len() as f64) * ratio).ceil() as usize;
    let mut pick: Vec<usize> = stratified_order(&strata, seed)[..k].to_vec();
    pick.sort_unstable();
    Ok(pick)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metas(n: usize) -> Vec<RecordingMeta> {
        (0..n)
            .map(|i| RecordingMeta {
                azimuth_deg: [-70.0, 0.0, 70.0][i % 3],
                elevation_deg: [-35.0, 35.0][(i / 3) % 2],
                modulation: Modulation::ALL[(i / 6) % 6],
                snr_db: 10.0,
                seed: i as u64,
            })
            .collect()
    }

    #[test]
    fn eighty_twenty() {
        let s = make_splits(&metas(100), &SplitSpec::default()).unwrap();
        assert_eq!(s.dev.len(), 80);
        assert_eq!(s.test.len(), 20);
        s.check_leak_free().unwrap();
        assert_eq!(s.labeled, s.dev);
    }

    #[test]
    fn tenth_covers_modulations() {
        let ms = metas(125);
        let spec = SplitSpec {
            label_ratio: 0.1,
            ..SplitSpec::default()
        };
        let s = make_splits(&ms, &spec).unwrap();
        assert_eq!(s.dev.len(), 100);
        assert_eq!(s.labeled.len(), 10);
        let mods: std::collections::BTreeSet<_> = s.labeled.iter().map(|&i| ms[i].modulation).collect();
        assert_eq!(mods.len(), 6);
    }

    #[test]
    fn zero_label_count_is_an_error() {
        let spec = SplitSpec {
            label_ratio: 0.001,
            ..SplitSpec::default()
        };
        let err = make_splits(&metas(50), &spec).unwrap_err().to_string();
        assert!(err.contains("at least"), "{err}");
    }

    #[test]
    fn deterministic_under_seed() {
        let ms = metas(60);
        let spec = SplitSpec {
            seed: 9,
            ..SplitSpec::default()
        };
        assert_eq!(make_splits(&ms, &spec).unwrap(), make_splits(&ms, &spec).unwrap());
    }

    #[test]
    fn prefix_balance() {
        let ms = metas(36);
        let strata: Vec<_> = ms.iter().map(Stratum::of).collect();
        let order = stratified_order(&strata, 3);
        let first: std::collections::BTreeSet<_> = order[..6].iter().map(|&i| ms[i].modulation).collect();
        assert_eq!(first.len(), 6);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..36).collect::<Vec<_>>());
    }
}
