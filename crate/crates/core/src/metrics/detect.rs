//! Moving-blob detection shared by the structure and adherence proxies.

use ndarray::{Array2, Array3, Array4, ArrayView3};

/// Absolute per-channel difference above which a pixel is foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.12;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub area: usize,
    /// `(x, y)` centroid in pixel coordinates (pixel centres at `+0.5`).
    /// [`detect_blobs`] refines it with estimated edge coverage.
    pub center: [f64; 2],
    /// `(min_row, min_col, max_row, max_col)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub pixels: Vec<(usize, usize)>,
}

impl Blob {
    /// Fraction of the bounding box covered by the blob.
    pub fn fill_ratio(&self) -> f64 {
        let (r0, c0, r1, c1) = self.bbox;
        self.area as f64 / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64
    }
}

/// Per-pixel temporal median, `[H, W, 3]`.
pub fn background_model(frames: &Array4<f32>) -> Array3<f32> {
    let (n, h, w, c) = frames.dim();
    let mut buf = vec![0f32; n];
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = frames[(k, y, x, ch)];
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        }
    })
}

pub fn foreground_mask(frame: ArrayView3<'_, f32>, background: &Array3<f32>) -> Array2<bool> {
    let (h, w, c) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).any(|ch| (frame[(y, x, ch)] - background[(y, x, ch)]).abs() > FOREGROUND_THRESHOLD)
    })
}

/// 4-connected components, largest first.
pub fn components(mask: &Array2<bool>) -> Vec<Blob> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start_r in 0..h {
        for start_c in 0..w {
            if !mask[(start_r, start_c)] || seen[(start_r, start_c)] {
                continue;
            }
            seen[(start_r, start_c)] = true;
            stack.push((start_r, start_c));
            let mut pixels = Vec::new();
            while let Some((r, c)) = stack.pop() {
                pixels.push((r, c));
                let nb = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in nb {
                    if nr < h && nc < w && mask[(nr, nc)] && !seen[(nr, nc)] {
                        seen[(nr, nc)] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            let area = pixels.len();
            let (mut sx, mut sy) = (0f64, 0f64);
            let mut bbox = (usize::MAX, usize::MAX, 0, 0);
            for &(r, c) in &pixels {
                sx += c as f64 + 0.5;
                sy += r as f64 + 0.5;
                bbox.0 = bbox.0.min(r);
                bbox.1 = bbox.1.min(c);
                bbox.2 = bbox.2.max(r);
                bbox.3 = bbox.3.max(c);
            }
            blobs.push(Blob {
                area,
                center: [sx / area as f64, sy / area as f64],
                bbox,
                pixels,
            });
        }
    }
    blobs.sort_by(|a, b| b.area.cmp(&a.area).then(a.bbox.cmp(&b.bbox)));
    blobs
}

fn diff(frame: ArrayView3<'_, f32>, bg: &Array3<f32>, r: usize, c: usize) -> [f32; 3] {
    [0, 1, 2].map(|ch| frame[(r, c, ch)] - bg[(r, c, ch)])
}

/// Sub-pixel centroid: pixels on and just outside the blob edge are weighted
/// by their estimated coverage, i.e. the projection of their background
/// difference onto that of the adjacent interior pixels.
pub fn refine_center(frame: ArrayView3<'_, f32>, bg: &Array3<f32>, blob: &Blob) -> [f64; 2] {
    let (h, w, _) = frame.dim();
    let mut inside = Array2::from_elem((h, w), false);
    for &(r, c) in &blob.pixels {
        inside[(r, c)] = true;
    }
    let neighbours = |r: usize, c: usize| {
        [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ]
        .into_iter()
        .filter(move |&(a, b)| a < h && b < w)
    };
    let interior = |r: usize, c: usize| {
        inside[(r, c)] && neighbours(r, c).filter(|&(a, b)| inside[(a, b)]).count() == 4
    };
    let mut mean = [0f32; 3];
    for &(r, c) in &blob.pixels {
        let d = diff(frame, bg, r, c);
        (0..3).for_each(|ch| mean[ch] += d[ch] / blob.area as f32);
    }

    let mut candidates: Vec<(usize, usize)> = blob.pixels.clone();
    for &(r, c) in &blob.pixels {
        for (a, b) in neighbours(r, c) {
            if !inside[(a, b)] {
                candidates.push((a, b));
            }
        }
    }
    candidates.sort_unstable();
    candidates.dedup();

    let (mut sw, mut sx, mut sy) = (0f64, 0f64, 0f64);
    for (r, c) in candidates {
        let weight = if interior(r, c) {
            1.0
        } else {
            let mut reference = [0f32; 3];
            let mut count = 0;
            for (a, b) in neighbours(r, c) {
                if interior(a, b) {
                    let d = diff(frame, bg, a, b);
                    (0..3).for_each(|ch| reference[ch] += d[ch]);
                    count += 1;
                }
            }
            if count == 0 {
                reference = mean;
            } else {
                reference.iter_mut().for_each(|v| *v /= count as f32);
            }
            let d = diff(frame, bg, r, c);
            let norm: f32 = reference.iter().map(|v| v * v).sum();
            if norm < 1e-8 {
                inside[(r, c)] as u8 as f32
            } else {
                let dot: f32 = (0..3).map(|ch| d[ch] * reference[ch]).sum();
                (dot / norm).clamp(0.0, 1.0)
            }
        } as f64;
        sw += weight;
        sx += weight * (c as f64 + 0.5);
        sy += weight * (r as f64 + 0.5);
    }
    if sw <= 0.0 {
        return blob.center;
    }
    [sx / sw, sy / sw]
}

/// Blobs per frame whose area lies in `area_range`, largest first, at most
/// `k`, with refined centres.
pub fn detect_blobs(
    frames: &Array4<f32>,
    k: usize,
    area_range: (f64, f64),
) -> Vec<Vec<Blob>> {
    let bg = background_model(frames);
    frames
        .outer_iter()
        .map(|frame| {
            components(&foreground_mask(frame, &bg))
                .into_iter()
                .filter(|b| (area_range.0..=area_range.1).contains(&(b.area as f64)))
                .take(k)
                .map(|mut b| {
                    b.center = refine_center(frame, &bg, &b);
                    b
                })
                .collect()
        })
        .collect()
}

/// A blob followed across frames.
#[derive(Debug, Clone)]
pub struct BlobTrack {
    pub blobs: Vec<Option<Blob>>,
}

impl BlobTrack {
    pub fn first(&self) -> Option<(usize, &Blob)> {
        self.blobs
            .iter()
            .enumerate()
            .find_map(|(i, b)| b.as_ref().map(|b| (i, b)))
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, &Blob)> {
        self.blobs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (i, b)))
    }
}

/// Greedy nearest-neighbour linking of per-frame detections into at most
/// `k` tracks, returned left to right by first appearance.
pub fn track_blobs(per_frame: Vec<Vec<Blob>>, k: usize, max_jump: f64) -> Vec<BlobTrack> {
    let n = per_frame.len();
    let mut tracks: Vec<BlobTrack> = Vec::new();
    let mut last: Vec<[f64; 2]> = Vec::new();
    for (t, blobs) in per_frame.into_iter().enumerate() {
        let mut free: Vec<Option<Blob>> = blobs.into_iter().map(Some).collect();
        let mut pairs = Vec::new();
        for (ti, c) in last.iter().enumerate() {
            for (bi, b) in free.iter().enumerate() {
                let b = b.as_ref().expect("all present before matching");
                let d = (b.center[0] - c[0]).hypot(b.center[1] - c[1]);
                if d <= max_jump {
                    pairs.push((d, ti, bi));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut used_track = vec![false; tracks.len()];
        for (_, ti, bi) in pairs {
            if used_track[ti] || free[bi].is_none() {
                continue;
            }
            let b = free[bi].take().expect("checked");
            last[ti] = b.center;
            tracks[ti].blobs[t] = Some(b);
            used_track[ti] = true;
        }
        let mut rest: Vec<Blob> = free.into_iter().flatten().collect();
        rest.sort_by(|a, b| a.center[0].total_cmp(&b.center[0]));
        for b in rest {
            if tracks.len() >= k {
                break;
            }
            let mut track = BlobTrack {
                blobs: vec![None; n],
            };
            last.push(b.center);
            track.blobs[t] = Some(b);
            tracks.push(track);
        }
    }
    tracks.sort_by(|a, b| {
        let fa = a.first().map(|(t, b)| (t, b.center[0])).unwrap_or((n, 0.0));
        let fb = b.first().map(|(t, b)| (t, b.center[0])).unwrap_or((n, 0.0));
        fa.0.cmp(&fb.0).then(fa.1.total_cmp(&fb.1))
    });
    tracks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_split_and_sort() {
        let mut m = Array2::from_elem((6, 6), false);
        m[(0, 0)] = true;
        for r in 3..6 {
            for c in 3..6 {
                m[(r, c)] = true;
            }
        }
        let blobs = components(&m);
        assert_eq!(blobs.len(), 2);
        assert_eq!(blobs[0].area, 9);
        assert_eq!(blobs[0].center, [4.5, 4.5]);
        assert_eq!(blobs[0].fill_ratio(), 1.0);
        assert_eq!(blobs[1].area, 1);
    }

    #[test]
    fn even_median_averages_middle_pair() {
        let mut f = Array4::<f32>::zeros((4, 1, 1, 3));
        for (k, v) in [0.0, 0.2, 0.4, 1.0].iter().enumerate() {
            f[(k, 0, 0, 0)] = *v;
        }
        let bg = background_model(&f);
        assert!((bg[(0, 0, 0)] - 0.3).abs() < 1e-6);
    }
}
