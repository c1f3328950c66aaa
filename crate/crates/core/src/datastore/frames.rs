//! Fixed-length frames cut from recordings.

use std::collections::BTreeSet;
use std::sync::Arc;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iq::ComplexMatrix;
use crate::sigsynth::{Modulation, Recording};
use crate::FRAME_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub recording_id: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub modulation: Modulation,
}

impl FrameLabels {
    pub fn of(recording_id: usize, rec: &Recording) -> Self {
        FrameLabels {
            recording_id,
            azimuth_deg: rec.meta.azimuth_deg,
            elevation_deg: rec.meta.elevation_deg,
            modulation: rec.meta.modulation,
        }
    }
}

/// `n_rx × 1024` complex samples with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct IQFrame {
    pub iq: ComplexMatrix,
    pub labels: FrameLabels,
}

impl IQFrame {
    pub fn new(iq: ComplexMatrix, labels: FrameLabels) -> Result<Self> {
        if iq.cols() != FRAME_LEN {
            return Err(Error::data(format!(
                "frame has {} samples, expected {FRAME_LEN}",
                iq.cols()
            )));
        }
        Ok(IQFrame { iq, labels })
    }

    pub fn n_rx(&self) -> usize {
        self.iq.rows()
    }

    /// Length of the real view, `n_rx · 2 · 1024`.
    pub fn real_len(&self) -> usize {
        self.n_rx() * 2 * FRAME_LEN
    }

    /// Writes the `(n_rx, 2, 1024)` real view: per antenna the real channel
    /// followed by the imaginary channel.
    pub fn write_real_view(&self, out: &mut [f32]) {
        assert_eq!(out.len(), self.real_len(), "real view buffer length");
        for (r, chunk) in out.chunks_exact_mut(2 * FRAME_LEN).enumerate() {
            let (re, im) = chunk.split_at_mut(FRAME_LEN);
            for ((c, a), b) in self.iq.row(r).iter().zip(re).zip(im) {
                *a = c.re;
                *b = c.im;
            }
        }
    }

    pub fn real_view(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.real_len()];
        self.write_real_view(&mut out);
        out
    }

    /// Inverse of [`IQFrame::real_view`].
    pub fn from_real_view(n_rx: usize, view: &[f32], labels: FrameLabels) -> Result<Self> {
        if view.len() != n_rx * 2 * FRAME_LEN {
            return Err(Error::data(format!(
                "real view of {} values does not hold {n_rx} antennas",
                view.len()
            )));
        }
        let mut data = Vec::with_capacity(n_rx * FRAME_LEN);
        for chunk in view.chunks_exact(2 * FRAME_LEN) {
            let (re, im) = chunk.split_at(FRAME_LEN);
            data.extend(re.iter().zip(im).map(|(&a, &b)| Complex32::new(a, b)));
        }
        IQFrame::new(ComplexMatrix::new(n_rx, FRAME_LEN, data)?, labels)
    }
}

/// Number of frames `slice_frames` yields for a recording of `len` samples.
pub fn frame_count(len: usize, stride: usize) -> usize {
    if len < FRAME_LEN || stride == 0 {
        0
    } else {
        (len - FRAME_LEN) / stride + 1
    }
}

/// Frames starting every `stride` samples; a short recording yields none.
pub fn slice_frames(recording: &Recording, recording_id: usize, stride: usize) -> Vec<IQFrame> {
    let labels = FrameLabels::of(recording_id, recording);
    (0..frame_count(recording.iq.cols(), stride))
        .map(|k| IQFrame {
            iq: recording.iq.columns(k * stride, FRAME_LEN),
            labels: labels.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FrameRef {
    recording: usize,
    offset: usize,
}

/// Lazily materialized frames over a shared set of recordings. Recording
/// ids are positions in the shared vector.
#[derive(Debug, Clone)]
pub struct FrameSet {
    recordings: Arc<Vec<Recording>>,
    refs: Vec<FrameRef>,
}

impl FrameSet {
    /// Non-overlapping frames of the listed recordings, in id order.
    pub fn new(recordings: Arc<Vec<Recording>>, ids: &[usize], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("frame stride must be positive"));
        }
        let n_rx = recordings.first().map(|r| r.iq.rows());
        let mut refs = Vec::new();
        for &id in ids {
            let rec = recordings
                .get(id)
                .ok_or_else(|| Error::data(format!("recording id {id} out of range")))?;
            if Some(rec.iq.rows()) != n_rx {
                return Err(Error::data(format!("recording {id} has a different antenna count")));
            }
            refs.extend((0..frame_count(rec.iq.cols(), stride)).map(|k| FrameRef {
                recording: id,
                offset: k * stride,
            }));
        }
        Ok(FrameSet { recordings, refs })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn n_rx(&self) -> usize {
        self.recordings.first().map_or(0, |r| r.iq.rows())
    }

    pub fn real_len(&self) -> usize {
        self.n_rx() * 2 * FRAME_LEN
    }

    pub fn labels(&self, i: usize) -> FrameLabels {
        let r = self.refs[i].recording;
        FrameLabels::of(r, &self.recordings[r])
    }

    pub fn frame(&self, i: usize) -> IQFrame {
        let FrameRef { recording, offset } = self.refs[i];
        let rec = &self.recordings[recording];
        IQFrame {
            iq: rec.iq.columns(offset, FRAME_LEN),
            labels: FrameLabels::of(recording, rec),
        }
    }

    /// Writes frame `i`'s real view without building the complex copy.
    pub fn write_real_view(&self, i: usize, out: &mut [f32]) {
        let FrameRef { recording, offset } = self.refs[i];
        let iq = &self.recordings[recording].iq;
        assert_eq!(out.len(), iq.rows() * 2 * FRAME_LEN, "real view buffer length");
        for (r, chunk) in out.chunks_exact_mut(2 * FRAME_LEN).enumerate() {
            let (re, im) = chunk.split_at_mut(FRAME_LEN);
            for ((c, a), b) in iq.row(r)[offset..offset + FRAME_LEN].iter().zip(re).zip(im) {
                *a = c.re;
                *b = c.im;
            }
        }
    }

    /// Frames at the given positions, sharing the same recordings.
    pub fn subset(&self, indices: &[usize]) -> FrameSet {
        FrameSet {
            recordings: Arc::clone(&self.recordings),
            refs: indices.iter().map(|&i| self.refs[i]).collect(),
        }
    }

    pub fn recording_ids(&self) -> BTreeSet<usize> {
        self.refs.iter().map(|r| r.recording).collect()
    }

    pub fn recordings(&self) -> &Arc<Vec<Recording>> {
        &self.recordings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::RecordingMeta;

    fn recording(len: usize) -> Recording {
        let data = (0..2 * len).map(|i| Complex32::new(i as f32, -(i as f32))).collect();
        Recording {
            iq: ComplexMatrix::new(2, len, data).unwrap(),
            meta: RecordingMeta {
                azimuth_deg: 10.0,
                elevation_deg: -20.0,
                modulation: Modulation::Qpsk,
                snr_db: 10.0,
                seed: 1,
            },
        }
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(1_000_000, 1024), 976);
        assert_eq!(frame_count(1024, 1024), 1);
        assert_eq!(frame_count(1023, 1024), 0);
        assert_eq!(slice_frames(&recording(1023), 0, 1024).len(), 0);
    }

    #[test]
    fn frames_inherit_labels_and_samples() {
        let rec = recording(3000);
        let frames = slice_frames(&rec, 7, 1024);
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].labels.recording_id, 7);
        assert_eq!(frames[1].labels.modulation, Modulation::Qpsk);
        assert_eq!(frames[1].iq.row(1)[0], rec.iq.row(1)[1024]);
    }

    #[test]
    fn real_view_round_trip() {
        let rec = recording(1024);
        let f = &slice_frames(&rec, 0, 1024)[0];
        let v = f.real_view();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1024], -0.0);
        assert_eq!(v[2048], 1024.0);
        let back = IQFrame::from_real_view(2, &v, f.labels.clone()).unwrap();
        assert_eq!(&back, f);
    }

    #[test]
    fn frame_set_matches_slicing() {
        let recs = Arc::new(vec![recording(2100), recording(1100)]);
        let set = FrameSet::new(Arc::clone(&recs), &[0, 1], 1024).unwrap();
        assert_eq!(set.len(), 3);
        let direct = slice_frames(&recs[0], 0, 1024);
        assert_eq!(set.frame(1), direct[1]);
        let mut buf = vec![0.0; set.real_len()];
        set.write_real_view(2, &mut buf);
        assert_eq!(buf, set.frame(2).real_view());
        assert_eq!(set.subset(&[2]).recording_ids(), BTreeSet::from([1]));
    }
}
