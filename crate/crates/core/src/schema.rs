//! The eight-attribute taxonomy and its label domain.
//!
//! Six scalar attributes on a 1–10 scale plus two categorical ones:
//! a 12-class primary color (hue wheel in 30° steps, red at 0°) and a
//! 3-class color harmony. The canonical order below is load-bearing:
//! label files, loss breakdowns, and head layouts all follow it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCALAR_ATTRIBUTE_COUNT: usize = 6;
pub const ATTRIBUTE_COUNT: usize = 8;

/// Hue-wheel class names, 30° apart starting at red = 0°.
pub const PRIMARY_COLOR_CLASSES: [&str; 12] = [
    "red",
    "orange",
    "yellow",
    "chartreuse",
    "green",
    "spring_green",
    "cyan",
    "azure",
    "blue",
    "violet",
    "magenta",
    "rose",
];

pub const HARMONY_CLASSES: [&str; 3] = ["monochromatic", "analogous", "complementary"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Scalar,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub kind: AttributeKind,
    /// Present when `kind == Scalar`; always `[1, 10]` in the canonical schema.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scalar_range: Option<(f64, f64)>,
    /// Present when `kind == Categorical`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDef>,
}

impl AttributeSchema {
    /// The fixed eight-attribute schema used everywhere in this crate.
    pub fn canonical() -> Self {
        let scalar = |name: &str| AttributeDef {
            name: name.to_string(),
            kind: AttributeKind::Scalar,
            scalar_range: Some((1.0, 10.0)),
            classes: None,
        };
        let categorical = |name: &str, classes: &[&str]| AttributeDef {
            name: name.to_string(),
            kind: AttributeKind::Categorical,
            scalar_range: None,
            classes: Some(classes.iter().map(|s| s.to_string()).collect()),
        };
        Self {
            attributes: vec![
                scalar("variety_of_texture"),
                scalar("variety_of_shape"),
                scalar("variety_of_size"),
                scalar("variety_of_color"),
                scalar("contrast"),
                scalar("repetition"),
                categorical("primary_color", &PRIMARY_COLOR_CLASSES),
                categorical("color_harmony", &HARMONY_CLASSES),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() != ATTRIBUTE_COUNT {
            return Err(Error::Config(format!(
                "schema must have exactly {ATTRIBUTE_COUNT} attributes, got {}",
                self.attributes.len()
            )));
        }
        for (i, def) in self.attributes.iter().enumerate() {
            match (i < SCALAR_ATTRIBUTE_COUNT, def.kind) {
                (true, AttributeKind::Scalar) => {
                    if def.scalar_range != Some((1.0, 10.0)) {
                        return Err(Error::Config(format!(
                            "scalar attribute '{}' must use range [1,10]",
                            def.name
                        )));
                    }
                }
                (false, AttributeKind::Categorical) => {
                    let classes = def.classes.as_deref().unwrap_or(&[]);
                    if classes.is_empty() {
                        return Err(Error::Config(format!(
                            "categorical attribute '{}' has no classes",
                            def.name
                        )));
                    }
                    let mut seen = std::collections::HashSet::new();
                    for class in classes {
                        if !seen.insert(class) {
                            return Err(Error::Config(format!(
                                "duplicate class '{class}' in attribute '{}'",
                                def.name
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "attribute '{}' has the wrong kind for position {i}",
                        def.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Class count of the categorical attribute at schema position `idx`.
    pub fn class_count(&self, idx: usize) -> usize {
        self.attributes[idx]
            .classes
            .as_ref()
            .map(|c| c.len())
            .unwrap_or(0)
    }

    pub fn class_index(&self, attr_idx: usize, class_name: &str) -> Option<usize> {
        self.attributes[attr_idx]
            .classes
            .as_ref()?
            .iter()
            .position(|c| c == class_name)
    }
}

/// Ground-truth values for one image: six scalars plus two class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeLabel {
    pub scalars: [f64; SCALAR_ATTRIBUTE_COUNT],
    pub primary_color: usize,
    pub color_harmony: usize,
}

impl AttributeLabel {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for (i, &v) in self.scalars.iter().enumerate() {
            if !(1.0..=10.0).contains(&v) || !v.is_finite() {
                return Err(Error::Label(format!(
                    "scalar '{}' = {v} outside [1,10]",
                    schema.attributes[i].name
                )));
            }
        }
        if self.primary_color >= schema.class_count(6) {
            return Err(Error::Label(format!(
                "primary_color index {} out of range",
                self.primary_color
            )));
        }
        if self.color_harmony >= schema.class_count(7) {
            return Err(Error::Label(format!(
                "color_harmony index {} out of range",
                self.color_harmony
            )));
        }
        Ok(())
    }
}

/// Maps a 1–10 label onto the model's [0,1] working scale.
#[inline]
pub fn label_to_model_space(v: f64) -> f64 {
    (v - 1.0) / 9.0
}

/// Inverse of [`label_to_model_space`].
#[inline]
pub fn model_space_to_label(u: f64) -> f64 {
    1.0 + 9.0 * u
}

/// Hue (degrees) to primary-color class. Bins are centered on multiples
/// of 30°, so red covers [-15°, 15°).
pub fn hue_to_class(hue_degrees: f64) -> usize {
    let h = hue_degrees.rem_euclid(360.0);
    ((h / 30.0).round() as usize) % 12
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_schema_is_valid() {
        let s = AttributeSchema::canonical();
        s.validate().unwrap();
        assert_eq!(s.attributes.len(), 8);
        assert_eq!(s.class_count(6), 12);
        assert_eq!(s.class_count(7), 3);
        assert_eq!(s.attribute_names()[4], "contrast");
    }

    #[test]
    fn validation_rejects_mutations() {
        let mut s = AttributeSchema::canonical();
        s.attributes.pop();
        assert!(s.validate().is_err());

        let mut s = AttributeSchema::canonical();
        s.attributes[6].classes.as_mut().unwrap().push("red".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn model_space_round_trip() {
        assert_eq!(label_to_model_space(1.0), 0.0);
        assert_eq!(label_to_model_space(10.0), 1.0);
        assert!((model_space_to_label(label_to_model_space(6.3)) - 6.3).abs() < 1e-12);
    }

    #[test]
    fn hue_bins_are_centered() {
        assert_eq!(hue_to_class(0.0), 0);
        assert_eq!(hue_to_class(14.9), 0);
        assert_eq!(hue_to_class(15.0), 1);
        assert_eq!(hue_to_class(359.0), 0);
        assert_eq!(hue_to_class(120.0), 4);
        assert_eq!(hue_to_class(120.0 + 120.0), 8);
    }

    #[test]
    fn label_validation() {
        let schema = AttributeSchema::canonical();
        let good = AttributeLabel {
            scalars: [1.0, 5.5, 10.0, 1.0, 2.0, 3.0],
            primary_color: 11,
            color_harmony: 2,
        };
        good.validate(&schema).unwrap();
        let mut bad = good.clone();
        bad.scalars[4] = 11.0;
        assert!(bad.validate(&schema).is_err());
        let mut bad = good;
        bad.primary_color = 12;
        assert!(bad.validate(&schema).is_err());
    }
}
