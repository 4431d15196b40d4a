//! Final-answer extraction from free-text model output, and grading against
//! the expected answer.
//!
//! Extraction is last-occurrence-wins: responses are instructed to state the
//! answer at the end, so later mentions override earlier speculation.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{ExpectedAnswer, QuestionType, CHOICE_LETTERS};

/// Relative tolerance for numeric grading.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Absolute tolerance for numeric grading.
pub const ABS_TOLERANCE: f64 = 1e-6;

/// A character range within the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// Slice `text` at a character span.
pub fn span_text(text: &str, span: Span) -> String {
    text.chars().skip(span.start).take(span.end - span.start).collect()
}

/// An exact rational number; fractions extracted from responses are kept as
/// numerator/denominator rather than rounded through floats.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Rational {
    pub num: i64,
    pub den: i64,
}

impl Rational {
    pub fn new(num: i64, den: i64) -> Option<Rational> {
        if den == 0 {
            return None;
        }
        let sign = if (num < 0) != (den < 0) && num != 0 { -1 } else { 1 };
        let (mut n, mut d) = (num.unsigned_abs(), den.unsigned_abs());
        let g = gcd(n, d);
        n /= g;
        d /= g;
        Some(Rational {
            num: sign * i64::try_from(n).ok()?,
            den: i64::try_from(d).ok()?,
        })
    }

    pub fn from_integer(value: i64) -> Rational {
        Rational { num: value, den: 1 }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Rational {
    fn eq(&self, other: &Self) -> bool {
        // Cross-multiplied in i128 so no reduction or overflow concerns.
        (self.num as i128) * (other.den as i128) == (other.num as i128) * (self.den as i128)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    if a == 0 {
        return b.max(1);
    }
    while b != 0 {
        let t = b;
        b = a % b;
        a = t;
    }
    a
}

/// Parse one numeric token: optional sign, thousands commas, decimals, or a
/// simple fraction "a/b". Returns `None` on malformed or overflowing input.
pub fn parse_number(token: &str) -> Option<Rational> {
    let token = token.replace(',', "");
    let (sign, body) = match token.strip_prefix('-') {
        Some(rest) => (-1i64, rest),
        None => (1i64, token.strip_prefix('+').unwrap_or(&token)),
    };
    if let Some((num, den)) = body.split_once('/') {
        let num: i64 = num.parse().ok()?;
        let den: i64 = den.parse().ok()?;
        return Rational::new(sign.checked_mul(num)?, den);
    }
    if let Some((int_part, frac_part)) = body.split_once('.') {
        if frac_part.is_empty() || !frac_part.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let int_val: i64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
        let scale = 10i64.checked_pow(u32::try_from(frac_part.len()).ok()?)?;
        let frac_val: i64 = frac_part.parse().ok()?;
        let num = int_val.checked_mul(scale)?.checked_add(frac_val)?;
        return Rational::new(sign.checked_mul(num)?, scale);
    }
    let value: i64 = body.parse().ok()?;
    Rational::new(sign.checked_mul(value)?, 1)
}

/// The answer found in a response, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractedAnswer {
    Choice { choice: char, span: Span },
    Value { value: Rational, span: Span },
    None,
}

impl ExtractedAnswer {
    pub fn is_none(&self) -> bool {
        matches!(self, ExtractedAnswer::None)
    }
}

static CHOICE_STATED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer\s*(?:is|:)\s*\(?([A-F])\)?\b").unwrap()
});
static CHOICE_PAREN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:^|[\s(])([A-F])\)").unwrap());
static CHOICE_LINE_END: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)(?:^|[\s(])\(?([A-F])\)?\s*[.!]?\s*$").unwrap()
});

static NUMBER_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[-+]?(?:\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+\.\d+|\d+/\d+|\d+)").unwrap()
});

fn byte_to_char(text: &str, byte_offset: usize) -> usize {
    text[..byte_offset].chars().count()
}

/// Last capture of `re` within `region`, as (letter, byte range in region).
fn last_letter_match(re: &Regex, region: &str) -> Option<(char, std::ops::Range<usize>)> {
    re.captures_iter(region).last().map(|caps| {
        let group = caps.get(1).unwrap();
        let letter = group.as_str().chars().next().unwrap().to_ascii_uppercase();
        (letter, group.range())
    })
}

/// Byte offset where the final 5 lines of `text` begin.
fn tail_offset(text: &str) -> usize {
    let mut newlines: Vec<usize> = text
        .bytes()
        .enumerate()
        .filter(|(_, b)| *b == b'\n')
        .map(|(i, _)| i)
        .collect();
    if newlines.len() < 5 {
        return 0;
    }
    newlines.drain(..newlines.len() - 5);
    newlines[0] + 1
}

/// Find the option letter stated in `text`.
///
/// A pattern cascade runs over the final 5 lines first, then over the whole
/// text: (1) "answer is X" / "answer: X", (2) "(X)" or "X)" as a standalone
/// token, (3) a lone letter token at line end. The last match of the first
/// pattern that hits wins; the letter is returned uppercase.
pub fn extract_choice(text: &str) -> ExtractedAnswer {
    let tail_start = tail_offset(text);
    let regions = if tail_start > 0 {
        vec![(tail_start, &text[tail_start..]), (0, text)]
    } else {
        vec![(0, text)]
    };
    for (base, region) in regions {
        for re in [&*CHOICE_STATED, &*CHOICE_PAREN, &*CHOICE_LINE_END] {
            if let Some((letter, range)) = last_letter_match(re, region) {
                let start = byte_to_char(text, base + range.start);
                return ExtractedAnswer::Choice {
                    choice: letter,
                    span: Span { start, end: start + 1 },
                };
            }
        }
    }
    ExtractedAnswer::None
}

/// Find the last numeric literal in `text`: signed integers (thousands
/// commas stripped), decimals, or simple fractions "a/b" kept exact. A
/// trailing degree sign or the word "degrees" is not part of the literal and
/// never blocks the parse.
pub fn extract_value(text: &str) -> ExtractedAnswer {
    let matches: Vec<_> = NUMBER_TOKEN.find_iter(text).collect();
    for m in matches.iter().rev() {
        if let Some(value) = parse_number(m.as_str()) {
            let start = byte_to_char(text, m.start());
            let end = start + m.as_str().chars().count();
            return ExtractedAnswer::Value {
                value,
                span: Span { start, end },
            };
        }
    }
    ExtractedAnswer::None
}

/// How a response was graded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeMethod {
    ChoiceMatch,
    NumericMatch,
    StringMatch,
    NoExtraction,
}

/// Grading outcome for one response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeOutcome {
    pub correct: bool,
    pub extracted: ExtractedAnswer,
    pub method: GradeMethod,
}

fn numbers_match(got: Rational, expected: Rational) -> bool {
    if got == expected {
        return true;
    }
    let (g, e) = (got.to_f64(), expected.to_f64());
    let diff = (g - e).abs();
    diff <= ABS_TOLERANCE || diff <= REL_TOLERANCE * e.abs()
}

fn normalize(text: &str) -> String {
    let trimmed = text.trim();
    let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
    trimmed.to_lowercase()
}

/// Grade `text` against `expected`. Total and deterministic: ungradable
/// responses come back as incorrect with `NoExtraction`, never as an error.
pub fn grade_response(
    text: &str,
    expected: &ExpectedAnswer,
    question_type: QuestionType,
) -> GradeOutcome {
    match question_type {
        QuestionType::MultipleChoice => {
            let extracted = extract_choice(text);
            match &extracted {
                ExtractedAnswer::Choice { choice, .. } => {
                    let target = match expected {
                        ExpectedAnswer::Choice { choice } => choice.to_ascii_uppercase(),
                        ExpectedAnswer::Value { value } => value
                            .chars()
                            .next()
                            .map(|c| c.to_ascii_uppercase())
                            .filter(|c| CHOICE_LETTERS.contains(c))
                            .unwrap_or('\0'),
                    };
                    GradeOutcome {
                        correct: *choice == target,
                        extracted: extracted.clone(),
                        method: GradeMethod::ChoiceMatch,
                    }
                }
                _ => GradeOutcome {
                    correct: false,
                    extracted: ExtractedAnswer::None,
                    method: GradeMethod::NoExtraction,
                },
            }
        }
        QuestionType::FreeForm => {
            let expected_text = expected.as_text();
            let extracted = extract_value(text);
            if let ExtractedAnswer::Value { value, .. } = &extracted {
                if let Some(target) = parse_number(&expected_text) {
                    return GradeOutcome {
                        correct: numbers_match(*value, target),
                        extracted: extracted.clone(),
                        method: GradeMethod::NumericMatch,
                    };
                }
            }
            // No numeric route: fall back to normalized string equality.
            if normalize(text) == normalize(&expected_text) {
                GradeOutcome {
                    correct: true,
                    extracted: ExtractedAnswer::None,
                    method: GradeMethod::StringMatch,
                }
            } else {
                GradeOutcome {
                    correct: false,
                    extracted: ExtractedAnswer::None,
                    method: GradeMethod::NoExtraction,
                }
            }
        }
    }
}
