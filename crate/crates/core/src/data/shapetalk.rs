//! ShapeTalk-lite: a deterministic synthetic corpus of templated dialogs
//! paired with rendered shape images. Scene attributes are spread over at
//! least two different turns, so the conditioning signal genuinely requires
//! reading the whole dialog, and early turns carry distractor small talk.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dialog::{Dialog, Turn};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Center,
    Corner,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|s| s == self).unwrap()
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn name(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }
    fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Position {
    pub const ALL: [Position; 2] = [Position::Center, Position::Corner];
    pub fn name(&self) -> &'static str {
        match self {
            Position::Center => "center",
            Position::Corner => "corner",
        }
    }
}

/// What the image shows; the dataset category is the shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
}

impl SceneSpec {
    pub fn category(&self) -> &'static str {
        self.shape.name()
    }

    /// shape x color class index (12 classes), the label the eval
    /// classifier is trained on.
    pub fn class_index(&self) -> usize {
        self.shape.index() * Color::ALL.len() + self.color.index()
    }
}

pub fn class_count() -> usize {
    Shape::ALL.len() * Color::ALL.len()
}

pub fn class_color(class: usize) -> Color {
    Color::ALL[class % Color::ALL.len()]
}

pub fn class_shape(class: usize) -> Shape {
    Shape::ALL[class / Color::ALL.len()]
}

/// Render the scene on a black background with the shape center offset by
/// `jitter` pixels.
pub fn render_scene(scene: &SceneSpec, size: usize, jitter: (i64, i64)) -> Tensor {
    let mut img = Tensor::filled(&[size, size, 3], -1.0);
    let s = size as f64;
    // corner sits one pixel in so the shape stays whole under jitter
    let (mut cy, mut cx) = match scene.position {
        Position::Center => (s / 2.0, s / 2.0),
        Position::Corner => (s / 4.0 + 1.0, s / 4.0 + 1.0),
    };
    cy += jitter.0 as f64;
    cx += jitter.1 as f64;
    let r = s / 4.0;
    let rgb = scene.color.rgb();
    for y in 0..size {
        for x in 0..size {
            let py = y as f64 + 0.5;
            let px = x as f64 + 0.5;
            let inside = match scene.shape {
                Shape::Circle => {
                    (py - cy) * (py - cy) + (px - cx) * (px - cx) <= r * r
                }
                Shape::Square => (py - cy).abs() <= r * 0.9 && (px - cx).abs() <= r * 0.9,
                Shape::Triangle => {
                    // upright isoceles: apex at cy - r, base at cy + r
                    let u = (py - (cy - r)) / (2.0 * r);
                    u >= 0.0 && u <= 1.0 && (px - cx).abs() <= u * r
                }
            };
            if inside {
                let d = img.data_mut();
                for c in 0..3 {
                    d[(y * size + x) * 3 + c] = rgb[c];
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug)]
pub struct ShapeTalkSample {
    pub dialog: Dialog,
    pub image: Tensor,
    pub scene: SceneSpec,
}

const OPENERS: [&str; 6] = [
    "Hey, how are you?",
    "Hi there!",
    "Good morning!",
    "Long day today.",
    "Hello again!",
    "Hey you!",
];

const REPLIES: [&str; 6] = [
    "Doing fine, just drawing.",
    "All good here.",
    "Pretty relaxed today.",
    "Not too bad.",
    "Same as always.",
    "Quite well, thanks.",
];

const COLOR_LINES: [&str; 4] = [
    "I drew a {color} thing.",
    "It came out {color}.",
    "I picked {color} for it.",
    "It is {color}.",
];

const SHAPE_LINES: [&str; 4] = [
    "It is a {shape}.",
    "Just a {shape}.",
    "A simple {shape}.",
    "The picture shows a {shape}.",
];

const POSITION_LINES: [&str; 3] = [
    "Right at the {position}.",
    "It sits at the {position}.",
    "At the {position}.",
];

const CLOSERS: [&str; 4] = [
    "Take a look.",
    "Here it is.",
    "Sending it now.",
    "Look at this.",
];

fn fill(template: &str, scene: &SceneSpec) -> String {
    template
        .replace("{color}", scene.color.name())
        .replace("{shape}", scene.shape.name())
        .replace("{position}", scene.position.name())
}

/// Deterministically generate `n` dialog-image samples for `seed`.
pub fn gen_shapetalk(n: usize, seed: u64) -> Vec<ShapeTalkSample> {
    assert!(n >= 1, "need at least one sample");
    (0..n)
        .map(|i| {
            let mut r = rng::rng_from(rng::derive2(seed, tags::DATA_GEN, i as u64));
            let scene = SceneSpec {
                shape: *Shape::ALL.choose(&mut r).unwrap(),
                color: *Color::ALL.choose(&mut r).unwrap(),
                position: *Position::ALL.choose(&mut r).unwrap(),
            };

            // attribute lines land in distinct turns
            let mut attr_lines = vec![
                fill(COLOR_LINES[r.gen_range(0..COLOR_LINES.len())], &scene),
                fill(SHAPE_LINES[r.gen_range(0..SHAPE_LINES.len())], &scene),
            ];
            if r.gen_bool(0.7) {
                attr_lines.push(fill(
                    POSITION_LINES[r.gen_range(0..POSITION_LINES.len())],
                    &scene,
                ));
            } else {
                // position folded into the shape turn keeps it specified
                let last = attr_lines.pop().unwrap();
                attr_lines.push(format!("{last} At the {}.", scene.position.name()));
            }

            let mut texts: Vec<String> = Vec::new();
            if r.gen_bool(0.8) {
                texts.push(OPENERS[r.gen_range(0..OPENERS.len())].to_string());
            }
            texts.push(REPLIES[r.gen_range(0..REPLIES.len())].to_string());
            texts.extend(attr_lines);
            texts.push(CLOSERS[r.gen_range(0..CLOSERS.len())].to_string());
            texts.truncate(6);

            let first_speaker = r.gen_range(0..2u8);
            let turns: Vec<Turn> = texts
                .iter()
                .enumerate()
                .map(|(k, t)| Turn {
                    speaker: (first_speaker + k as u8) % 2,
                    text: t.clone(),
                })
                .collect();
            let jitter = (r.gen_range(-1..=1i64), r.gen_range(-1..=1i64));
            let image = render_scene(&scene, super::image::IMG_SIZE, jitter);
            let dialog = Dialog {
                turns,
                image_ref: format!("images/{i:05}.png"),
                category: Some(scene.category().to_string()),
            };
            debug_assert!(dialog.validate().is_ok());
            ShapeTalkSample {
                dialog,
                image,
                scene,
            }
        })
        .collect()
}
