//! Instruction templates: a selector over color/shape attributes plus a
//! modifier, rendered to a fixed token grammar and resolved symbolically
//! against a scene.

use super::scene::{Color, PlacedObject, Scene, Shape, COLORS, SHAPES};
use super::vocab::{render_text, token_id};
use crate::{Error, Result};

/// Attribute predicate: color and/or shape (at least one set).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selector {
    pub color: Option<Color>,
    pub shape: Option<Shape>,
}

impl Selector {
    pub fn matches(&self, obj: &PlacedObject) -> bool {
        self.color.map_or(true, |c| obj.color == c) && self.shape.map_or(true, |s| obj.shape == s)
    }
}

/// Attribute excluded by an `except` clause; always on the axis the base
/// selector leaves free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptPred {
    Color(Color),
    Shape(Shape),
}

impl ExceptPred {
    fn matches(&self, obj: &PlacedObject) -> bool {
        match self {
            ExceptPred::Color(c) => obj.color == *c,
            ExceptPred::Shape(s) => obj.shape == *s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modifier {
    All,
    Leftmost,
    Rightmost,
    Largest,
    /// The k largest matches by cell count, k in {2, 3}.
    CountK(usize),
    Except(ExceptPred),
    /// Generator-side marker for instructions whose selector matches
    /// nothing; renders and parses as `All`.
    NoneMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionSpec {
    pub selector: Selector,
    pub modifier: Modifier,
}

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
    }
}

fn shape_word(s: Shape) -> &'static str {
    match s {
        Shape::Square => "square",
        Shape::Circle => "circle",
        Shape::Triangle => "triangle",
    }
}

fn count_word(k: usize) -> &'static str {
    match k {
        2 => "two",
        3 => "three",
        _ => unreachable!("count modifier limited to 2 or 3"),
    }
}

fn selector_words(sel: &Selector) -> Vec<&'static str> {
    match (sel.color, sel.shape) {
        (Some(c), Some(s)) => vec![color_word(c), shape_word(s)],
        (None, Some(s)) => vec![shape_word(s)],
        (Some(c), None) => vec![color_word(c), "object"],
        (None, None) => unreachable!("selector must constrain at least one axis"),
    }
}

impl InstructionSpec {
    /// Canonical target phrase: the selector words only.
    pub fn phrase_tokens(&self) -> Vec<u32> {
        selector_words(&self.selector)
            .iter()
            .map(|w| token_id(w).unwrap())
            .collect()
    }

    /// Render to instruction tokens.
    pub fn render(&self) -> Vec<u32> {
        let mut words: Vec<&'static str> = vec!["segment"];
        match self.modifier {
            Modifier::All | Modifier::NoneMatching => {
                words.push("every");
                words.extend(selector_words(&self.selector));
            }
            Modifier::Leftmost => {
                words.push("the");
                words.push("leftmost");
                words.extend(selector_words(&self.selector));
            }
            Modifier::Rightmost => {
                words.push("the");
                words.push("rightmost");
                words.extend(selector_words(&self.selector));
            }
            Modifier::Largest => {
                words.push("the");
                words.push("largest");
                words.extend(selector_words(&self.selector));
            }
            Modifier::CountK(k) => {
                words.push("the");
                words.push(count_word(k));
                words.push("largest");
                words.extend(selector_words(&self.selector));
            }
            Modifier::Except(pred) => {
                words.push("every");
                match pred {
                    ExceptPred::Color(c) => {
                        // Base selector constrains shape only.
                        words.push(shape_word(self.selector.shape.expect("shape-base except")));
                        words.push("except");
                        words.push(color_word(c));
                    }
                    ExceptPred::Shape(s) => {
                        words.push(color_word(self.selector.color.expect("color-base except")));
                        words.push("object");
                        words.push("except");
                        words.push(shape_word(s));
                    }
                }
            }
        }
        words.iter().map(|w| token_id(w).unwrap()).collect()
    }

    pub fn render_text(&self) -> String {
        render_text(&self.render()).unwrap()
    }

    /// Parse instruction tokens back to a spec. `NoneMatching` normalizes
    /// to `All`: the no-target case is a property of the scene, not of the
    /// text.
    pub fn parse(tokens: &[u32]) -> Result<InstructionSpec> {
        let words: Vec<&str> = tokens
            .iter()
            .map(|&t| super::vocab::token_text(t))
            .collect::<Result<_>>()?;
        let fail = |msg: &str| Error::Dataset(format!("cannot parse instruction {words:?}: {msg}"));
        if words.first() != Some(&"segment") {
            return Err(fail("missing leading verb"));
        }
        match words.get(1) {
            Some(&"every") => {
                if let Some(pos) = words.iter().position(|&w| w == "except") {
                    let base = &words[2..pos];
                    let excl = &words[pos + 1..];
                    if excl.len() != 1 {
                        return Err(fail("except clause must name one attribute"));
                    }
                    if base.len() == 1 {
                        let shape = parse_shape(base[0]).ok_or_else(|| fail("except base must be a shape"))?;
                        let color = parse_color(excl[0]).ok_or_else(|| fail("excluded attribute must be a color"))?;
                        Ok(InstructionSpec {
                            selector: Selector { color: None, shape: Some(shape) },
                            modifier: Modifier::Except(ExceptPred::Color(color)),
                        })
                    } else if base.len() == 2 && base[1] == "object" {
                        let color = parse_color(base[0]).ok_or_else(|| fail("except base must be a color"))?;
                        let shape = parse_shape(excl[0]).ok_or_else(|| fail("excluded attribute must be a shape"))?;
                        Ok(InstructionSpec {
                            selector: Selector { color: Some(color), shape: None },
                            modifier: Modifier::Except(ExceptPred::Shape(shape)),
                        })
                    } else {
                        Err(fail("unrecognized except clause"))
                    }
                } else {
                    let selector = parse_selector(&words[2..]).ok_or_else(|| fail("bad selector"))?;
                    Ok(InstructionSpec { selector, modifier: Modifier::All })
                }
            }
            Some(&"the") => match words.get(2) {
                Some(&"leftmost") => Ok(InstructionSpec {
                    selector: parse_selector(&words[3..]).ok_or_else(|| fail("bad selector"))?,
                    modifier: Modifier::Leftmost,
                }),
                Some(&"rightmost") => Ok(InstructionSpec {
                    selector: parse_selector(&words[3..]).ok_or_else(|| fail("bad selector"))?,
                    modifier: Modifier::Rightmost,
                }),
                Some(&"largest") => Ok(InstructionSpec {
                    selector: parse_selector(&words[3..]).ok_or_else(|| fail("bad selector"))?,
                    modifier: Modifier::Largest,
                }),
                Some(&w) if w == "two" || w == "three" => {
                    if words.get(3) != Some(&"largest") {
                        return Err(fail("count must be followed by largest"));
                    }
                    let k = if w == "two" { 2 } else { 3 };
                    Ok(InstructionSpec {
                        selector: parse_selector(&words[4..]).ok_or_else(|| fail("bad selector"))?,
                        modifier: Modifier::CountK(k),
                    })
                }
                _ => Err(fail("unknown determiner clause")),
            },
            _ => Err(fail("unknown instruction form")),
        }
    }

    /// Scene-side semantics: indices of the selected objects, in canonical
    /// (leftmost column, then topmost row) order.
    pub fn resolve(&self, scene: &Scene) -> Vec<usize> {
        let side = scene.side;
        let key = |i: &usize| {
            let o = &scene.objects[*i];
            (o.col_key(side), o.row_key(side))
        };
        let mut matches: Vec<usize> = scene
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| self.selector.matches(o).then_some(i))
            .collect();
        matches.sort_by_key(key);
        let mut selected: Vec<usize> = match self.modifier {
            Modifier::All | Modifier::NoneMatching => matches,
            Modifier::Leftmost => matches.first().copied().into_iter().collect(),
            Modifier::Rightmost => {
                // Maximum leftmost-occupied column, ties broken by top row.
                matches
                    .iter()
                    .copied()
                    .max_by(|&a, &b| {
                        let (ca, ra) = key(&a);
                        let (cb, rb) = key(&b);
                        ca.cmp(&cb).then(rb.cmp(&ra))
                    })
                    .into_iter()
                    .collect()
            }
            Modifier::Largest => select_largest(&matches, scene, 1),
            Modifier::CountK(k) => select_largest(&matches, scene, k),
            Modifier::Except(pred) => matches
                .into_iter()
                .filter(|&i| !pred.matches(&scene.objects[i]))
                .collect(),
        };
        selected.sort_by_key(key);
        selected
    }
}

fn select_largest(matches: &[usize], scene: &Scene, k: usize) -> Vec<usize> {
    let side = scene.side;
    let mut by_size: Vec<usize> = matches.to_vec();
    by_size.sort_by(|&a, &b| {
        let oa = &scene.objects[a];
        let ob = &scene.objects[b];
        ob.cell_count()
            .cmp(&oa.cell_count())
            .then(oa.col_key(side).cmp(&ob.col_key(side)))
            .then(oa.row_key(side).cmp(&ob.row_key(side)))
    });
    by_size.truncate(k);
    by_size
}

fn parse_color(word: &str) -> Option<Color> {
    COLORS.iter().copied().find(|&c| color_word(c) == word)
}

fn parse_shape(word: &str) -> Option<Shape> {
    SHAPES.iter().copied().find(|&s| shape_word(s) == word)
}

fn parse_selector(words: &[&str]) -> Option<Selector> {
    match words.len() {
        1 => parse_shape(words[0]).map(|s| Selector { color: None, shape: Some(s) }),
        2 => {
            let color = parse_color(words[0])?;
            if words[1] == "object" {
                Some(Selector { color: Some(color), shape: None })
            } else {
                parse_shape(words[1]).map(|s| Selector { color: Some(color), shape: Some(s) })
            }
        }
        _ => None,
    }
}

/// All selectors, in a fixed enumeration order.
pub fn all_selectors() -> Vec<Selector> {
    let mut out = Vec::new();
    for &c in &COLORS {
        for &s in &SHAPES {
            out.push(Selector { color: Some(c), shape: Some(s) });
        }
    }
    for &s in &SHAPES {
        out.push(Selector { color: None, shape: Some(s) });
    }
    for &c in &COLORS {
        out.push(Selector { color: Some(c), shape: None });
    }
    out
}
