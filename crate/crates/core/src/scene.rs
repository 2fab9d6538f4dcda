//! Ground-truth scenes and their line-oriented text format.
//!
//! ```text
//! image 64 64 3
//! 0 12 8 30 25.5
//! 2 40 33 61 60
//! ```
//!
//! The header is `image W H C`; every following line is `class x1 y1 x2 y2`
//! in pixels. Numbers are written with Rust's shortest round-trip float
//! formatting, so write-then-parse is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BoxXYXY,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtScene {
    pub image_w: usize,
    pub image_h: usize,
    pub num_classes: usize,
    pub objects: Vec<GtObject>,
}

impl GtScene {
    pub fn new(image_w: usize, image_h: usize, num_classes: usize, objects: Vec<GtObject>) -> Result<Self> {
        let scene = Self {
            image_w,
            image_h,
            num_classes,
            objects,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Boxes must sit in `[0, W) x [0, H)` so every corner quantizes to a real cell.
    pub fn validate(&self) -> Result<()> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            check_object(o, self.image_w, self.image_h, self.num_classes)
                .map_err(|m| Error::invalid(format!("object {i}: {m}")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("image {} {} {}\n", self.image_w, self.image_h, self.num_classes);
        for o in &self.objects {
            let b = o.bbox;
            let _ = writeln!(s, "{} {} {} {} {}", o.class_id, b.x1, b.y1, b.x2, b.y2);
        }
        s
    }

    /// Parses the scene format; `origin` labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| err(1, "missing `image W H C` header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "image" {
            return Err(err(hl + 1, format!("expected `image W H C`, got `{header}`")));
        }
        let dim = |i: usize, name: &str| -> Result<usize> {
            let v: usize = fields[i]
                .parse()
                .map_err(|_| err(hl + 1, format!("{name} `{}` is not a positive integer", fields[i])))?;
            if v == 0 {
                return Err(err(hl + 1, format!("{name} must be positive")));
            }
            Ok(v)
        };
        let (w, h, c) = (dim(1, "width")?, dim(2, "height")?, dim(3, "class count")?);

        let mut objects = Vec::new();
        for (ln, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err(ln + 1, format!("expected `class x1 y1 x2 y2`, got `{line}`")));
            }
            let class_id: usize = f[0]
                .parse()
                .map_err(|_| err(ln + 1, format!("class `{}` is not a non-negative integer", f[0])))?;
            let mut coords = [0.0; 4];
            for (k, tok) in f[1..].iter().enumerate() {
                coords[k] = tok
                    .parse::<f64>()
                    .map_err(|_| err(ln + 1, format!("coordinate `{tok}` is not a number")))?;
            }
            let o = GtObject {
                bbox: BoxXYXY::from_array(coords),
                class_id,
            };
            check_object(&o, w, h, c).map_err(|m| err(ln + 1, m))?;
            objects.push(o);
        }
        Ok(Self {
            image_w: w,
            image_h: h,
            num_classes: c,
            objects,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading scene {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing scene {}", path.display()), e))
    }
}

fn check_object(o: &GtObject, w: usize, h: usize, c: usize) -> std::result::Result<(), String> {
    let b = o.bbox;
    if o.class_id >= c {
        return Err(format!("class {} out of range for {c} classes", o.class_id));
    }
    if !b.is_valid() {
        return Err(format!("box {:?} is not ordered and finite", b.to_array()));
    }
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 >= w as f64 || b.y2 >= h as f64 {
        return Err(format!("box {:?} leaves the {w}x{h} image", b.to_array()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_header_and_objects() {
        let s = GtScene::parse("image 64 48 3\n0 1 2 10 20.5\n2 30 30 40 47.25\n", "t").unwrap();
        assert_eq!((s.image_w, s.image_h, s.num_classes), (64, 48, 3));
        assert_eq!(s.objects.len(), 2);
        assert_eq!(s.objects[1].bbox, BoxXYXY::new(30.0, 30.0, 40.0, 47.25));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = GtScene::parse("image 64 64 3\n0 1 2 3 4\n1 2 3 x 5\n", "scene.txt").unwrap_err();
        assert_eq!(e.to_string(), "scene.txt:3: coordinate `x` is not a number");
        let e = GtScene::parse("image 64 64 3\n5 1 2 3 4\n", "s").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = GtScene::parse("img 64 64 3\n", "s").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = GtScene::parse("image 64 64 3\n0 10 2 3 4\n", "s").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = GtScene::parse("image 64 64 3\n0 1 2 64 4\n", "s").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = GtScene::parse("image 64 64 3\n0 1 2 3\n", "s").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = GtScene::new(32, 32, 1, vec![]).unwrap();
        assert_eq!(GtScene::parse(&s.to_text(), "t").unwrap(), s);
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(
            objs in prop::collection::vec((0usize..3, 0.0..30.0f64, 0.0..30.0f64, 0.0..33.0f64, 0.0..33.0f64), 0..6)
        ) {
            let objects = objs
                .into_iter()
                .map(|(c, x, y, w, h)| GtObject { bbox: BoxXYXY::new(x, y, x + w, y + h), class_id: c })
                .collect();
            let s = GtScene::new(64, 64, 3, objects).unwrap();
            let back = GtScene::parse(&s.to_text(), "t").unwrap();
            for (a, b) in s.objects.iter().zip(&back.objects) {
                for (u, v) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                    prop_assert_eq!(u.to_bits(), v.to_bits());
                }
            }
            prop_assert_eq!(back, s);
        }
    }
}
