//! Scene description parser.
//!
//! ```text
//! # comment
//! scene nominal {
//!     frames 260
//!     brightness range 0.0 0.3
//!     precipitation step 26 0.4 0.6
//!     segment const 1
//! }
//! ```
//!
//! Features not mentioned in a block default to `const 0`.

use std::collections::HashSet;

use super::{Feature, SceneSpec, ValueProgram, PATTERN_COUNT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Token<'a> {
    text: &'a str,
    line: usize,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let content = line.split('#').next().unwrap_or("");
        let mut start = None;
        for (i, ch) in content.char_indices() {
            let is_brace = ch == '{' || ch == '}';
            if ch.is_whitespace() || is_brace {
                if let Some(s) = start.take() {
                    tokens.push(Token {
                        text: &content[s..i],
                        line: line_no,
                    });
                }
                if is_brace {
                    tokens.push(Token {
                        text: &content[i..i + 1],
                        line: line_no,
                    });
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            tokens.push(Token {
                text: &content[s..],
                line: line_no,
            });
        }
    }
    tokens
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    last_line: usize,
}

impl<'a> Parser<'a> {
    fn next(&mut self, expecting: &str) -> Result<Token<'a>> {
        match self.tokens.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                self.last_line = t.line;
                Ok(t.clone())
            }
            None => Err(Error::Syntax {
                line: self.last_line,
                message: format!("unexpected end of input, expected {expecting}"),
            }),
        }
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos)
    }

    fn expect(&mut self, text: &str) -> Result<()> {
        let tok = self.next(&format!("`{text}`"))?;
        if tok.text != text {
            return Err(syntax(&tok, format!("expected `{text}`, found `{}`", tok.text)));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<(f64, usize)> {
        let tok = self.next(what)?;
        let value: f64 = tok
            .text
            .parse()
            .map_err(|_| syntax(&tok, format!("expected {what}, found `{}`", tok.text)))?;
        if !value.is_finite() {
            return Err(syntax(&tok, format!("{what} must be finite")));
        }
        Ok((value, tok.line))
    }

    fn integer(&mut self, what: &str) -> Result<usize> {
        let tok = self.next(what)?;
        tok.text
            .parse()
            .map_err(|_| syntax(&tok, format!("expected {what}, found `{}`", tok.text)))
    }
}

fn syntax(tok: &Token<'_>, message: String) -> Error {
    Error::Syntax {
        line: tok.line,
        message,
    }
}

fn check_value(feature: Feature, value: f64) -> Result<()> {
    let (lo, hi) = if feature.is_continuous() {
        (0.0, 1.0)
    } else {
        (0.0, f64::from(PATTERN_COUNT - 1))
    };
    let integral_ok = feature.is_continuous() || value.fract() == 0.0;
    if !(lo..=hi).contains(&value) || !integral_ok {
        return Err(Error::Domain {
            feature: feature.name().to_string(),
            value,
            lo,
            hi,
        });
    }
    Ok(())
}

/// Parses scene blocks from `text`.
pub fn parse_spec(text: &str) -> Result<Vec<SceneSpec>> {
    let mut p = Parser {
        tokens: tokenize(text),
        pos: 0,
        last_line: 1,
    };
    let mut specs = Vec::new();
    let mut names = HashSet::new();

    while p.peek().is_some() {
        p.expect("scene")?;
        let name_tok = p.next("scene name")?;
        if name_tok.text == "{" || name_tok.text == "}" {
            return Err(syntax(&name_tok, "expected scene name".into()));
        }
        let name = name_tok.text.to_string();
        if !names.insert(name.clone()) {
            return Err(Error::DuplicateScene(name));
        }
        p.expect("{")?;

        let mut frame_count: Option<usize> = None;
        let mut programs: [Option<(ValueProgram, usize)>; 4] = Default::default();
        loop {
            let tok = p.next("`}` or a statement")?;
            match tok.text {
                "}" => break,
                "frames" => {
                    let n = p.integer("frame count")?;
                    if n == 0 {
                        return Err(syntax(&tok, "frame count must be positive".into()));
                    }
                    if frame_count.replace(n).is_some() {
                        return Err(syntax(&tok, "`frames` given twice".into()));
                    }
                }
                word => {
                    let feature = Feature::from_name(word)
                        .ok_or_else(|| syntax(&tok, format!("unknown feature or keyword `{word}`")))?;
                    let kind = p.next("program kind")?;
                    let program = match kind.text {
                        "const" => {
                            let (v, _) = p.number("value")?;
                            check_value(feature, v)?;
                            ValueProgram::Const(v)
                        }
                        "range" => {
                            let (lo, _) = p.number("lower bound")?;
                            let (hi, _) = p.number("upper bound")?;
                            check_value(feature, lo)?;
                            check_value(feature, hi)?;
                            if lo > hi {
                                return Err(syntax(&kind, format!("range bounds reversed: {lo} > {hi}")));
                            }
                            ValueProgram::Range { lo, hi }
                        }
                        "step" => {
                            let at = p.integer("step index")?;
                            let (before, _) = p.number("value before step")?;
                            let (after, _) = p.number("value after step")?;
                            check_value(feature, before)?;
                            check_value(feature, after)?;
                            ValueProgram::Step { at, before, after }
                        }
                        "ramp" => {
                            let (start, _) = p.number("start value")?;
                            let (end, _) = p.number("end value")?;
                            check_value(feature, start)?;
                            check_value(feature, end)?;
                            ValueProgram::Ramp { start, end }
                        }
                        other => {
                            return Err(syntax(
                                &kind,
                                format!("unknown program `{other}` (const, range, step, ramp)"),
                            ))
                        }
                    };
                    if programs[feature.index()].replace((program, tok.line)).is_some() {
                        return Err(syntax(&tok, format!("`{word}` given twice")));
                    }
                }
            }
        }

        let frame_count = frame_count.ok_or_else(|| Error::Syntax {
            line: name_tok.line,
            message: format!("scene `{name}` has no `frames` statement"),
        })?;
        for (program, line) in programs.iter().flatten() {
            if let ValueProgram::Step { at, .. } = program {
                if *at >= frame_count {
                    return Err(Error::Syntax {
                        line: *line,
                        message: format!("step index {at} not below frame count {frame_count}"),
                    });
                }
            }
        }
        let programs = programs.map(|p| p.map(|(prog, _)| prog).unwrap_or(ValueProgram::Const(0.0)));
        specs.push(SceneSpec {
            name,
            frame_count,
            programs,
        });
    }
    Ok(specs)
}
