//! Procedural object layouts and the renderer for inactive images and
//! interaction clips.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Rgb = [f32; 3];

/// Part side length as a fraction of the image size.
const PART_FRAC: f64 = 0.16;
/// Global layout shift, fraction of the image size.
const GLOBAL_JITTER: f64 = 0.07;
/// Additional per-part shift, fraction of the image size.
const PART_JITTER: f64 = 0.03;
const BODY_COLOR_JITTER: f32 = 0.06;
const PART_COLOR_JITTER: f32 = 0.05;
const SKIN: Rgb = [0.96, 0.76, 0.62];
const DISTRACTOR: Rgb = [0.92, 0.85, 0.10];
const ACTION_COLORS: [Rgb; 4] = [[0.90, 0.12, 0.12], [0.12, 0.78, 0.18], [0.15, 0.25, 0.95], [0.85, 0.15, 0.85]];

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PartBox {
    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }

    /// Half the shorter side.
    pub fn radius(&self) -> f64 {
        ((self.x1 - self.x0).min(self.y1 - self.y0) + 1) as f64 / 2.0
    }
}

/// Class layout in unit coordinates: body rectangles and the candidate
/// part centers. Each instance assigns its action parts and one distractor
/// part to a random permutation of the slots, so part position alone never
/// identifies the action.
struct Template {
    body: &'static [[f64; 4]],
    color: Rgb,
    slots: [[f64; 2]; 5],
}

const LO: f64 = 0.26;
const MID: f64 = 0.5;
const HI: f64 = 0.74;

// Part slots sit on a 3×3 grid whose spacing exceeds the part side plus
// twice the part jitter, so parts never overlap.
const TEMPLATES: [Template; 6] = [
    Template {
        body: &[[0.18, 0.18, 0.62, 0.82], [0.62, 0.38, 0.84, 0.62]],
        color: [0.275, 0.250, 0.225],
        slots: [[HI, MID], [MID, LO], [MID, HI], [LO, LO], [LO, MID]],
    },
    Template {
        body: &[[0.18, 0.40, 0.82, 0.84], [0.38, 0.16, 0.62, 0.40]],
        color: [0.225, 0.250, 0.290],
        slots: [[MID, LO], [LO, HI], [HI, HI], [HI, LO], [MID, MID]],
    },
    Template {
        body: &[[0.18, 0.18, 0.82, 0.82]],
        color: [0.260, 0.225, 0.190],
        slots: [[LO, LO], [HI, HI], [HI, LO], [LO, HI], [MID, MID]],
    },
    Template {
        body: &[[0.38, 0.16, 0.62, 0.84], [0.16, 0.38, 0.84, 0.62]],
        color: [0.240, 0.275, 0.240],
        slots: [[MID, HI], [MID, LO], [LO, MID], [HI, LO], [MID, MID]],
    },
    Template {
        body: &[[0.16, 0.36, 0.84, 0.64], [0.38, 0.64, 0.62, 0.84], [0.16, 0.16, 0.36, 0.36]],
        color: [0.290, 0.260, 0.275],
        slots: [[LO, MID], [HI, MID], [MID, HI], [MID, LO], [LO, LO]],
    },
    Template {
        body: &[[0.16, 0.16, 0.36, 0.84], [0.16, 0.64, 0.84, 0.84], [0.36, 0.38, 0.84, 0.62]],
        color: [0.250, 0.240, 0.275],
        slots: [[LO, HI], [HI, HI], [MID, LO], [HI, MID], [LO, LO]],
    },
];

pub const MAX_CLASSES: usize = TEMPLATES.len();
pub const MAX_ACTIONS: usize = ACTION_COLORS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub bbox: PartBox,
    pub color: Rgb,
    /// Action whose hotspot this part is; `None` for the distractor.
    pub action: Option<usize>,
}

/// One rendered object: its layout, colors and static sensor noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub class: usize,
    pub size: usize,
    pub background: Rgb,
    pub body: Vec<(PartBox, Rgb)>,
    pub parts: Vec<Part>,
    /// Additive noise shared by the inactive image and every clip frame.
    pub noise: Vec<f32>,
}

impl ObjectInstance {
    /// The hotspot part of `action`, if the object affords it.
    pub fn hotspot(&self, action: usize) -> Option<&Part> {
        self.parts.iter().find(|p| p.action == Some(action))
    }
}

fn jitter_color<R: Rng>(c: Rgb, amount: f32, rng: &mut R) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn pixel_box(x0: f64, y0: f64, x1: f64, y1: f64, size: usize) -> PartBox {
    let s = size as f64;
    let clamp = |v: f64| (v * s).round().clamp(0.0, s - 1.0) as usize;
    PartBox { x0: clamp(x0), y0: clamp(y0), x1: clamp(x1).max(clamp(x0)), y1: clamp(y1).max(clamp(y0)) }
}

/// Samples an instance of `class` that carries hotspot parts for
/// `affords` (action indices).
pub fn gen_object<R: Rng>(
    class: usize,
    affords: &[usize],
    size: usize,
    noise: f64,
    rng: &mut R,
) -> Result<ObjectInstance> {
    let t = TEMPLATES
        .get(class)
        .ok_or_else(|| Error::InvalidArgument(format!("object class {class} has no layout (at most {MAX_CLASSES})")))?;
    if let Some(&a) = affords.iter().find(|&&a| a >= MAX_ACTIONS) {
        return Err(Error::InvalidArgument(format!("action {a} has no part color (at most {MAX_ACTIONS})")));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("image size {size} below 16")));
    }
    let (gx, gy) = (rng.random_range(-GLOBAL_JITTER..=GLOBAL_JITTER), rng.random_range(-GLOBAL_JITTER..=GLOBAL_JITTER));
    let background = {
        let g = 0.06 + rng.random_range(-0.03f32..=0.03);
        [g, g, g]
    };
    let color = jitter_color(t.color, BODY_COLOR_JITTER, rng);
    let body = t.body.iter().map(|r| (pixel_box(r[0] + gx, r[1] + gy, r[2] + gx, r[3] + gy, size), color)).collect();
    let side = (PART_FRAC * size as f64).round() as usize;
    let mut parts = Vec::new();
    let mut order: Vec<usize> = (0..t.slots.len()).collect();
    order.shuffle(rng);
    let used: Vec<(usize, Option<usize>)> =
        affords.iter().map(|&a| Some(a)).chain(std::iter::once(None)).zip(order).map(|(a, slot)| (slot, a)).collect();
    for (slot, action) in used {
        let [cx, cy] = t.slots[slot];
        let px = (cx + gx + rng.random_range(-PART_JITTER..=PART_JITTER)) * size as f64;
        let py = (cy + gy + rng.random_range(-PART_JITTER..=PART_JITTER)) * size as f64;
        let x0 = (px - side as f64 / 2.0).round().clamp(0.0, (size - side) as f64) as usize;
        let y0 = (py - side as f64 / 2.0).round().clamp(0.0, (size - side) as f64) as usize;
        let base = action.map_or(DISTRACTOR, |a| ACTION_COLORS[a]);
        parts.push(Part {
            bbox: PartBox { x0, y0, x1: x0 + side - 1, y1: y0 + side - 1 },
            color: jitter_color(base, PART_COLOR_JITTER, rng),
            action,
        });
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(format!("noise level: {e}")))?;
    let noise = (0..3 * size * size).map(|_| normal.sample(rng) as f32).collect();
    Ok(ObjectInstance { class, size, background, body, parts, noise })
}

/// Manipulator disc drawn on top of the object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Manipulator {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: Rgb,
}

/// Per-frame state of the interaction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameState {
    pub manipulator: Option<Manipulator>,
    /// Pressed part index and press strength in `[0, 1]`.
    pub highlight: Option<(usize, f32)>,
}

fn fill(img: &mut [f32], size: usize, b: &PartBox, c: Rgb) {
    for y in b.y0..=b.y1 {
        for x in b.x0..=b.x1 {
            for (ch, &v) in c.iter().enumerate() {
                img[(ch * size + y) * size + x] = v;
            }
        }
    }
}

fn disc(img: &mut [f32], size: usize, m: &Manipulator) {
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - m.x, y as f64 - m.y);
            if dx * dx + dy * dy <= m.radius * m.radius {
                for (ch, &v) in m.color.iter().enumerate() {
                    img[(ch * size + y) * size + x] = v;
                }
            }
        }
    }
}

/// A pressed part grows by up to `PRESS_GROWTH` pixels per side and its
/// color moves toward the fully saturated hue.
const PRESS_GROWTH: f32 = 2.0;
const PRESS_SATURATION: f32 = 0.8;

fn pressed(p: &Part, k: f32, size: usize) -> (PartBox, Rgb) {
    let g = (PRESS_GROWTH * k).round() as usize;
    let b = p.bbox;
    let grown = PartBox {
        x0: b.x0.saturating_sub(g),
        y0: b.y0.saturating_sub(g),
        x1: (b.x1 + g).min(size - 1),
        y1: (b.y1 + g).min(size - 1),
    };
    let color = p.color.map(|v| {
        let pure = if v > 0.5 { 1.0 } else { 0.0 };
        v + (pure - v) * PRESS_SATURATION * k
    });
    (grown, color)
}

/// Renders `obj` as a 3×S×S image in `[0, 1]`. Parts are drawn over the
/// manipulator, which therefore shows as a ring around a part it presses.
pub fn render(obj: &ObjectInstance, state: &FrameState) -> Tensor<f32> {
    let s = obj.size;
    let mut img = vec![0.0f32; 3 * s * s];
    for (ch, &v) in obj.background.iter().enumerate() {
        img[ch * s * s..(ch + 1) * s * s].fill(v);
    }
    for (b, c) in &obj.body {
        fill(&mut img, s, b, *c);
    }
    if let Some(m) = &state.manipulator {
        disc(&mut img, s, m);
    }
    for (i, p) in obj.parts.iter().enumerate() {
        let (b, c) = match state.highlight {
            Some((j, k)) if j == i => pressed(p, k, s),
            _ => (p.bbox, p.color),
        };
        fill(&mut img, s, &b, c);
    }
    for (v, n) in img.iter_mut().zip(&obj.noise) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, s, s], img).expect("image extents match")
}

/// First frame index of the contact phase: the final `⌈T/3⌉` frames.
pub fn contact_start(frames: usize) -> usize {
    frames - frames.div_ceil(3)
}

/// Frame states for a clip in which the manipulator approaches the hotspot
/// part of `action` along a curved path and presses it during the contact
/// phase.
pub fn clip_states<R: Rng>(obj: &ObjectInstance, action: usize, frames: usize, rng: &mut R) -> Result<Vec<FrameState>> {
    if frames < 3 {
        return Err(Error::InvalidArgument(format!("clips need at least 3 frames, got {frames}")));
    }
    let part_idx =
        obj.parts.iter().position(|p| p.action == Some(action)).ok_or_else(|| {
            Error::InvalidArgument(format!("object class {} does not afford action {action}", obj.class))
        })?;
    let s = obj.size as f64;
    let r0 = s / 16.0;
    let r1 = s * 9.0 / 64.0;
    let color = jitter_color(SKIN, 0.03, rng);
    let [tx, ty] = obj.parts[part_idx].bbox.center();
    let (mut sx, mut sy) = (0.0, 0.0);
    for attempt in 0.. {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.45..0.6) * s;
        sx = (tx + dist * angle.cos()).clamp(r0, s - 1.0 - r0);
        sy = (ty + dist * angle.sin()).clamp(r0, s - 1.0 - r0);
        if (sx - tx).hypot(sy - ty) >= 0.3 * s || attempt >= 32 {
            break;
        }
    }
    let bend = rng.random_range(-0.15..=0.15) * s;
    let (len, mx, my) = ((tx - sx).hypot(ty - sy).max(1e-9), (sx + tx) / 2.0, (sy + ty) / 2.0);
    let (cx, cy) = (mx - bend * (ty - sy) / len, my + bend * (tx - sx) / len);
    let arrive = contact_start(frames);
    let contact = frames - arrive;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let state = if t < arrive {
            let u = t as f64 / arrive as f64;
            let w = |a: f64, c: f64, b: f64| (1.0 - u) * (1.0 - u) * a + 2.0 * u * (1.0 - u) * c + u * u * b;
            FrameState {
                manipulator: Some(Manipulator { x: w(sx, cx, tx), y: w(sy, cy, ty), radius: r0, color }),
                highlight: None,
            }
        } else {
            let k = (t - arrive + 1) as f64 / contact as f64;
            FrameState {
                manipulator: Some(Manipulator {
                    x: tx + rng.random_range(-1.0..=1.0),
                    y: ty + rng.random_range(-1.0..=1.0),
                    radius: r0 + (r1 - r0) * k,
                    color,
                }),
                highlight: Some((part_idx, k as f32)),
            }
        };
        out.push(state);
    }
    Ok(out)
}

/// Renders a T×3×S×S clip.
pub fn render_clip(obj: &ObjectInstance, states: &[FrameState]) -> Result<Tensor<f32>> {
    let frames: Vec<Tensor<f32>> = states.iter().map(|st| render(obj, st)).collect();
    Tensor::stack(&frames)
}
