//! Class-agnostic box proposals.
//!
//! The pipeline is deliberately simple and fully deterministic:
//!
//! 1. threshold against the border-estimated background color to get a
//!    foreground mask;
//! 2. extract 4-connected components — a component small enough to be one
//!    object contributes its tight box directly;
//! 3. sweep multi-scale square windows (stride = scale / `window_stride_div`)
//!    across larger components, which are usually several touching objects,
//!    keeping windows that are filled enough with foreground;
//! 4. snap every window to the tight bounds of the foreground inside it, so
//!    proposals hug objects instead of quantising to the window grid;
//! 5. class-agnostic greedy NMS ranked by fill ratio, then a hard cap.
//!
//! Window fills are computed on an integral image of the mask, so the sweep
//! is O(1) per window.

use super::descriptor::{border_background_color, foreground_mask};
use super::DetectorConfig;
use crate::geom::{iou, BBox};
use image::RgbImage;

/// A proposal candidate with its foreground fill (the ranking key).
#[derive(Debug, Clone)]
struct Candidate {
    bbox: BBox,
    fill: f64,
}

/// Integral image over a boolean mask; `sum(x0, y0, x1, y1)` counts true
/// cells in the half-open rectangle `[x0, x1) x [y0, y1)`.
struct Integral {
    w: usize,
    data: Vec<u32>,
}

impl Integral {
    fn build(mask: &[bool], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut data = vec![0u32; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += u32::from(mask[y * w + x]);
                data[(y + 1) * stride + (x + 1)] = data[y * stride + (x + 1)] + row;
            }
        }
        Integral { w, data }
    }

    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = self.w + 1;
        self.data[y1 * s + x1] + self.data[y0 * s + x0]
            - self.data[y0 * s + x1]
            - self.data[y1 * s + x0]
    }
}

/// One 4-connected foreground component: pixel count and tight bounds.
struct Component {
    count: u32,
    x0: usize,
    y0: usize,
    x1: usize, // exclusive
    y1: usize, // exclusive
}

fn components(mask: &[bool], w: usize, h: usize) -> Vec<Component> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.clear();
        queue.push(start);
        let mut comp = Component { count: 0, x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
        while let Some(idx) = queue.pop() {
            let (x, y) = (idx % w, idx / w);
            comp.count += 1;
            comp.x0 = comp.x0.min(x);
            comp.y0 = comp.y0.min(y);
            comp.x1 = comp.x1.max(x + 1);
            comp.y1 = comp.y1.max(y + 1);
            let mut push = |nx: usize, ny: usize| {
                let nidx = ny * w + nx;
                if mask[nidx] && !seen[nidx] {
                    seen[nidx] = true;
                    queue.push(nidx);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Tight foreground bounds within a window, or `None` for an empty window.
fn snap_to_content(
    mask: &[bool],
    w: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) -> Option<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            if mask[y * w + x] {
                let b = bounds.get_or_insert((x, y, x + 1, y + 1));
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x + 1);
                b.3 = b.3.max(y + 1);
            }
        }
    }
    bounds
}

fn candidate_from_bounds(
    integral: &Integral,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) -> Candidate {
    let fg = f64::from(integral.sum(x0, y0, x1, y1));
    let area = ((x1 - x0) * (y1 - y0)) as f64;
    let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
        .expect("component bounds are non-empty");
    Candidate { bbox, fill: fg / area }
}

/// Proposes candidate boxes for `img`. Returns at most
/// `cfg.max_proposals` boxes ordered by descending foreground fill (ties
/// broken lexicographically on coordinates), deduplicated by class-agnostic
/// NMS at `cfg.proposal_nms_iou`. Returns an empty vector for images with no
/// foreground at all.
pub fn propose(img: &RgbImage, cfg: &DetectorConfig) -> Vec<BBox> {
    let bg = border_background_color(img, cfg.border_band);
    propose_with_background(img, bg, cfg)
}

/// [`propose`] with a pre-computed background estimate, so callers that also
/// embed descriptors do the border scan only once.
pub fn propose_with_background(img: &RgbImage, bg: [u8; 3], cfg: &DetectorConfig) -> Vec<BBox> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = foreground_mask(img, bg, cfg.fg_threshold);
    let integral = Integral::build(&mask, w, h);

    let mut candidates: Vec<Candidate> = Vec::new();
    for comp in components(&mask, w, h) {
        candidates.push(candidate_from_bounds(&integral, comp.x0, comp.y0, comp.x1, comp.y1));
        if comp.count <= cfg.max_single_object_area {
            continue; // plausibly a single object; its tight box suffices
        }
        // A merged blob: sweep windows across its bounds at every scale.
        for &scale in &cfg.window_scales {
            let scale = scale as usize;
            let stride = (scale / cfg.window_stride_div as usize).max(1);
            let min_fill_px = (cfg.min_window_fill * (scale * scale) as f64).ceil() as u32;
            let xs = sweep_positions(comp.x0, comp.x1, scale, stride, w);
            let ys = sweep_positions(comp.y0, comp.y1, scale, stride, h);
            for &wy in &ys {
                for &wx in &xs {
                    if integral.sum(wx, wy, wx + scale, wy + scale) < min_fill_px {
                        continue;
                    }
                    if let Some((sx0, sy0, sx1, sy1)) =
                        snap_to_content(&mask, w, wx, wy, wx + scale, wy + scale)
                    {
                        candidates.push(candidate_from_bounds(&integral, sx0, sy0, sx1, sy1));
                    }
                }
            }
        }
    }

    // Rank by fill, dedupe exact snaps, then greedy class-agnostic NMS.
    candidates.sort_by(|a, b| b.fill.total_cmp(&a.fill).then(a.bbox.lex_cmp(&b.bbox)));
    candidates.dedup_by(|a, b| a.bbox == b.bbox);
    let mut kept: Vec<Candidate> = Vec::new();
    for cand in candidates {
        if kept.len() >= cfg.max_proposals {
            break;
        }
        let suppressed = kept.iter().any(|k| iou(&k.bbox, &cand.bbox) >= cfg.proposal_nms_iou);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept.into_iter().map(|c| c.bbox).collect()
}

/// Window start positions covering `[lo, hi)` at the given stride, clamped to
/// the image, with an extra right-aligned window so the sweep always reaches
/// the far edge of the component.
fn sweep_positions(lo: usize, hi: usize, scale: usize, stride: usize, limit: usize) -> Vec<usize> {
    let mut xs = Vec::new();
    if scale > limit {
        return xs;
    }
    let start = lo.saturating_sub(stride / 2);
    let last = hi.saturating_sub(scale / 2).min(limit - scale);
    let mut x = start.min(limit - scale);
    loop {
        xs.push(x);
        if x >= last {
            break;
        }
        x = (x + stride).min(limit - scale);
    }
    // Right-aligned window over the component end.
    let aligned = hi.min(limit).saturating_sub(scale);
    if xs.last() != Some(&aligned) && !xs.contains(&aligned) {
        xs.push(aligned);
    }
    xs.sort_unstable();
    xs.dedup();
    xs
}
