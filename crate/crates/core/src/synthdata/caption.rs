//! Caption grammar.
//!
//! ```text
//! caption  := sprites "on" "a" bg "background"
//! sprites  := sprite | sprite "and" sprite | sprite "," sprite "and" sprite
//! sprite   := "a" colour shape motion
//! motion   := "moving" ("right" | "left" | "up" | "down") | "standing" "still"
//! ```
//!
//! Sprites are listed left to right by their position in the first frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scene::{Background, SceneSpec, Shape};

/// Named hues, evenly spaced around the colour wheel.
pub const COLOR_NAMES: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];

pub fn color_hue(name: &str) -> Option<f64> {
    COLOR_NAMES
        .iter()
        .position(|&c| c == name)
        .map(|i| i as f64 / COLOR_NAMES.len() as f64)
}

/// Nearest named colour for a hue in cycles.
pub fn color_name(hue: f64) -> &'static str {
    let n = COLOR_NAMES.len() as f64;
    let idx = (hue.rem_euclid(1.0) * n).round() as usize % COLOR_NAMES.len();
    COLOR_NAMES[idx]
}

pub fn shape_name(shape: Shape) -> &'static str {
    match shape {
        Shape::Circle => "circle",
        Shape::Square => "square",
        Shape::Triangle => "triangle",
    }
}

fn parse_shape(word: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|&s| shape_name(s) == word)
}

pub fn background_word(bg: Background) -> &'static str {
    match bg {
        Background::Flat => "flat",
        Background::Stripes => "striped",
        Background::Checker => "checkered",
        Background::Noise => "noisy",
    }
}

fn parse_background(word: &str) -> Option<Background> {
    Background::ALL
        .into_iter()
        .find(|&b| background_word(b) == word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionDirection {
    Right,
    Left,
    Up,
    Down,
    Still,
}

impl MotionDirection {
    /// Dominant axis of a displacement; `y` points down.
    pub fn from_displacement(dx: f64, dy: f64, still_below: f64) -> Self {
        if dx.hypot(dy) < still_below {
            MotionDirection::Still
        } else if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                MotionDirection::Right
            } else {
                MotionDirection::Left
            }
        } else if dy > 0.0 {
            MotionDirection::Down
        } else {
            MotionDirection::Up
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            MotionDirection::Right => "moving right",
            MotionDirection::Left => "moving left",
            MotionDirection::Up => "moving up",
            MotionDirection::Down => "moving down",
            MotionDirection::Still => "standing still",
        }
    }
}

/// Velocities below this (pixels/frame) are captioned as standing still.
pub const STILL_SPEED: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpriteAttributes {
    pub color: String,
    pub shape: Shape,
    pub motion: MotionDirection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionAttributes {
    pub sprites: Vec<SpriteAttributes>,
    pub background: Background,
}

impl CaptionAttributes {
    /// Number of individually checkable attributes.
    pub fn count(&self) -> usize {
        3 * self.sprites.len() + 1
    }

    pub fn to_caption(&self) -> String {
        let phrases: Vec<String> = self
            .sprites
            .iter()
            .map(|s| format!("a {} {} {}", s.color, shape_name(s.shape), s.motion.phrase()))
            .collect();
        let joined = match phrases.len() {
            0 => String::new(),
            1 => phrases[0].clone(),
            n => format!("{} and {}", phrases[..n - 1].join(", "), phrases[n - 1]),
        };
        format!(
            "{joined} on a {} background",
            background_word(self.background)
        )
    }
}

/// Attribute tuple of a scene, sprites ordered by initial `x`.
pub fn scene_attributes(spec: &SceneSpec) -> CaptionAttributes {
    let mut order: Vec<usize> = (0..spec.sprites.len()).collect();
    order.sort_by(|&a, &b| {
        spec.center(a, 0)[0]
            .partial_cmp(&spec.center(b, 0)[0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sprites = order
        .into_iter()
        .map(|i| {
            let s = &spec.sprites[i];
            let [vx, vy] = s.trajectory.velocity;
            SpriteAttributes {
                color: color_name(s.hue).to_string(),
                shape: s.shape,
                motion: MotionDirection::from_displacement(vx, vy, STILL_SPEED),
            }
        })
        .collect();
    CaptionAttributes {
        sprites,
        background: spec.background,
    }
}

pub fn caption_scene(spec: &SceneSpec) -> String {
    scene_attributes(spec).to_caption()
}

/// Every word the grammar can produce, punctuation included.
pub fn caption_vocabulary() -> Vec<&'static str> {
    let mut v = vec![
        "a", "and", ",", "on", "background", "moving", "right", "left", "up", "down", "standing",
        "still",
    ];
    v.extend(COLOR_NAMES);
    v.extend(Shape::ALL.into_iter().map(shape_name));
    v.extend(Background::ALL.into_iter().map(background_word));
    v
}

/// Lower-cases and splits on whitespace, keeping commas as tokens.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .replace(',', " , ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptionError {
    #[error("unexpected token {token:?} at position {position}, expected {expected}")]
    UnexpectedToken {
        token: String,
        position: usize,
        expected: &'static str,
    },
    #[error("caption ended early, expected {expected}")]
    UnexpectedEnd { expected: &'static str },
}

struct Cursor<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, expected: &'static str) -> Result<&'a str, CaptionError> {
        let tok = self
            .tokens
            .get(self.pos)
            .ok_or(CaptionError::UnexpectedEnd { expected })?;
        self.pos += 1;
        Ok(tok.as_str())
    }

    fn fail(&self, expected: &'static str) -> CaptionError {
        CaptionError::UnexpectedToken {
            token: self.tokens[self.pos - 1].clone(),
            position: self.pos - 1,
            expected,
        }
    }

    fn expect(&mut self, word: &'static str) -> Result<(), CaptionError> {
        if self.next(word)? == word {
            Ok(())
        } else {
            Err(self.fail(word))
        }
    }
}

pub fn parse_caption(caption: &str) -> Result<CaptionAttributes, CaptionError> {
    let tokens = tokenize(caption);
    let mut cur = Cursor {
        tokens: &tokens,
        pos: 0,
    };
    let mut sprites = Vec::new();
    loop {
        cur.expect("a")?;
        let color = cur.next("a colour")?;
        if color_hue(color).is_none() {
            return Err(cur.fail("a colour"));
        }
        let shape = parse_shape(cur.next("a shape")?).ok_or_else(|| cur.fail("a shape"))?;
        let motion = match cur.next("a motion")? {
            "moving" => match cur.next("a direction")? {
                "right" => MotionDirection::Right,
                "left" => MotionDirection::Left,
                "up" => MotionDirection::Up,
                "down" => MotionDirection::Down,
                _ => return Err(cur.fail("a direction")),
            },
            "standing" => {
                cur.expect("still")?;
                MotionDirection::Still
            }
            _ => return Err(cur.fail("a motion")),
        };
        sprites.push(SpriteAttributes {
            color: color.to_string(),
            shape,
            motion,
        });
        match cur.next("',', 'and' or 'on'")? {
            "," | "and" => continue,
            "on" => break,
            _ => return Err(cur.fail("',', 'and' or 'on'")),
        }
    }
    cur.expect("a")?;
    let background =
        parse_background(cur.next("a background style")?).ok_or_else(|| cur.fail("a background style"))?;
    cur.expect("background")?;
    if cur.pos < tokens.len() {
        return Err(CaptionError::UnexpectedToken {
            token: tokens[cur.pos].clone(),
            position: cur.pos,
            expected: "end of caption",
        });
    }
    Ok(CaptionAttributes {
        sprites,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::scene::{Coarseness, Sprite, StyleFamily, Trajectory};

    fn sprite(shape: Shape, hue: f64, x: f64, v: [f64; 2]) -> Sprite {
        Sprite {
            shape,
            hue,
            saturation: 0.85,
            value: 0.9,
            size: 0.25,
            trajectory: Trajectory::linear([x, 16.0], v),
        }
    }

    fn scene(sprites: Vec<Sprite>, background: Background) -> SceneSpec {
        SceneSpec {
            seed: 0,
            background,
            palette: 0,
            style: StyleFamily::Synthetic,
            sprites,
            frame_count: 8,
            height: 32,
            width: 32,
            coarseness: Coarseness::L0,
        }
    }

    #[test]
    fn single_sprite_template() {
        let spec = scene(vec![sprite(Shape::Circle, 0.0, 8.0, [2.0, 0.0])], Background::Stripes);
        assert_eq!(
            caption_scene(&spec),
            "a red circle moving right on a striped background"
        );
    }

    #[test]
    fn sprites_listed_left_to_right() {
        let spec = scene(
            vec![
                sprite(Shape::Square, 4.0 / 6.0, 24.0, [0.0, -2.0]),
                sprite(Shape::Triangle, 2.0 / 6.0, 6.0, [0.0, 2.0]),
                sprite(Shape::Circle, 0.0, 14.0, [-2.0, 0.0]),
            ],
            Background::Noise,
        );
        let caption = caption_scene(&spec);
        assert_eq!(
            caption,
            "a green triangle moving down, a red circle moving left and a blue square moving up on a noisy background"
        );
        // independent oracle: sort initial x
        let mut xs: Vec<(f64, &str)> = spec
            .sprites
            .iter()
            .map(|s| (s.trajectory.start[0], shape_name(s.shape)))
            .collect();
        xs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let parsed = parse_caption(&caption).unwrap();
        let shapes: Vec<&str> = parsed.sprites.iter().map(|s| shape_name(s.shape)).collect();
        assert_eq!(shapes, xs.iter().map(|p| p.1).collect::<Vec<_>>());
    }

    #[test]
    fn parse_error_names_token() {
        let err = parse_caption("a red hexagon moving right on a flat background").unwrap_err();
        assert!(err.to_string().contains("hexagon"), "{err}");
        let err = parse_caption("a red circle moving sideways on a flat background").unwrap_err();
        assert!(err.to_string().contains("sideways"));
    }

    #[test]
    fn still_sprite_round_trips() {
        let spec = scene(vec![sprite(Shape::Circle, 0.5, 16.0, [0.0, 0.0])], Background::Flat);
        let caption = caption_scene(&spec);
        assert_eq!(caption, "a cyan circle standing still on a flat background");
        assert_eq!(parse_caption(&caption).unwrap(), scene_attributes(&spec));
    }

    #[test]
    fn vocabulary_covers_generated_words() {
        let vocab = caption_vocabulary();
        let spec = scene(
            vec![
                sprite(Shape::Square, 5.0 / 6.0, 4.0, [0.0, 0.0]),
                sprite(Shape::Triangle, 1.0 / 6.0, 20.0, [-2.0, 0.0]),
            ],
            Background::Checker,
        );
        for tok in tokenize(&caption_scene(&spec)) {
            assert!(vocab.contains(&tok.as_str()), "{tok}");
        }
    }

    #[test]
    fn hue_naming_wraps() {
        assert_eq!(color_name(0.97), "red");
        assert_eq!(color_name(0.62), "blue");
    }
}
