//! Final-answer extraction and grading.
//!
//! Completions are expected to end with the sentence
//! `Final Answer: The final answer is $answer$. I hope it is correct.`
//! This module pulls the answer span out of arbitrary completion text,
//! normalizes it to a canonical form, and decides equality with exact
//! rational arithmetic (no floating-point tolerance).

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

/// Marker phrase that introduces the answer span.
pub const FINAL_ANSWER_MARKER: &str = "The final answer is";

/// Trailing sentence that closes the answer span when present.
pub const CLOSING_SENTENCE: &str = "I hope it is correct.";

/// An answer captured from a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    /// Verbatim span between the marker and the terminating period,
    /// with surrounding `$` delimiters and whitespace stripped.
    pub raw: String,
    /// `normalize_answer(raw)`; idempotent under re-normalization.
    pub canonical: String,
}

/// Extract the final answer from a completion, if the marker phrase occurs.
///
/// The span runs from the *last* occurrence of the marker (self-corrected
/// completions may quote an earlier wrong answer; the final statement wins)
/// to the terminating period before the closing sentence, or end of text.
pub fn extract_final_answer(completion: &str) -> Option<FinalAnswer> {
    let start = completion.rfind(FINAL_ANSWER_MARKER)? + FINAL_ANSWER_MARKER.len();
    let mut span = &completion[start..];
    if let Some(close) = span.find(CLOSING_SENTENCE) {
        span = &span[..close];
    }
    let mut span = span.trim();
    // The terminating period belongs to the sentence, not the answer. A bare
    // "42." reads as the integer 42 either way, so stripping is always safe.
    if let Some(stripped) = span.strip_suffix('.') {
        span = stripped.trim_end();
    }
    let raw = strip_outer_dollars(span).trim().to_string();
    let canonical = normalize_answer(&raw);
    Some(FinalAnswer { raw, canonical })
}

fn strip_outer_dollars(s: &str) -> &str {
    let mut out = s.trim();
    while out.len() >= 2 && out.starts_with('$') && out.ends_with('$') {
        out = out[1..out.len() - 1].trim();
    }
    out
}

static FRACTION_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\\[dt]?frac\{([^{}]+)\}\{([^{}]+)\}").unwrap());
static THOUSANDS_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$").unwrap());
static TRAILING_ZERO_DECIMAL_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^([+-]?\d+)\.0+$").unwrap());

/// Canonicalize an answer string.
///
/// Strips whitespace, outer `$`/brace delimiters, and thousands separators;
/// drops a trailing `.0` on integers; rewrites `\frac{a}{b}` to `a/b`;
/// lowercases purely alphabetic answers. Runs to a fixpoint so repeated
/// normalization is a no-op. Empty-after-trim input yields the empty string
/// (graded as incorrect by callers).
pub fn normalize_answer(raw: &str) -> String {
    let mut cur = raw.to_string();
    for _ in 0..16 {
        let next = normalize_once(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

fn normalize_once(s: &str) -> String {
    let mut out = s.trim().to_string();

    // Outer delimiters: $...$ pairs and fully-wrapping brace pairs.
    loop {
        let t = out.trim();
        if t.len() >= 2 && t.starts_with('$') && t.ends_with('$') {
            out = t[1..t.len() - 1].to_string();
            continue;
        }
        if t.len() >= 2 && t.starts_with('{') && t.ends_with('}') && brace_balanced_outer(t) {
            out = t[1..t.len() - 1].to_string();
            continue;
        }
        out = t.to_string();
        break;
    }

    out = FRACTION_RE.replace_all(&out, "$1/$2").into_owned();

    if THOUSANDS_RE.is_match(&out) {
        out = out.replace(',', "");
    }
    if let Some(c) = TRAILING_ZERO_DECIMAL_RE.captures(&out) {
        out = c[1].to_string();
    }
    if !out.is_empty() && out.chars().all(|c| c.is_ascii_alphabetic() || c == ' ') {
        out = out.to_lowercase();
    }
    out.trim().to_string()
}

// True when the outermost braces wrap the whole string, e.g. "{1,2}" but
// not "{1}{2}".
fn brace_balanced_outer(s: &str) -> bool {
    let mut depth = 0i32;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 && i + 1 != s.len() {
                    return false;
                }
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

/// Decide answer equality on canonical forms.
///
/// Exact string match wins immediately; otherwise both sides are parsed as
/// exact rationals (integers, decimals, `a/b` fractions) and compared by
/// value. Unparseable inputs fall back to the string comparison result.
pub fn answers_equal(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    match (parse_rational(a), parse_rational(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// Parse an integer, decimal, or `a/b` fraction into an exact rational.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n = parse_rational(num)?;
        let d = parse_rational(den)?;
        if d.is_zero() {
            return None;
        }
        return Some(n / d);
    }
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => (-1, rest),
        None => (1, s.strip_prefix('+').unwrap_or(s)),
    };
    if digits.is_empty() {
        return None;
    }
    if let Some((int_part, frac_part)) = digits.split_once('.') {
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
            || (int_part.is_empty() && frac_part.is_empty())
        {
            return None;
        }
        let int_val: BigInt = if int_part.is_empty() {
            BigInt::zero()
        } else {
            int_part.parse().ok()?
        };
        let mut numer = int_val * BigInt::from(10u32).pow(frac_part.len() as u32);
        if !frac_part.is_empty() {
            numer += frac_part.parse::<BigInt>().ok()?;
        }
        let denom = BigInt::from(10u32).pow(frac_part.len() as u32);
        return Some(BigRational::new(BigInt::from(sign) * numer, denom));
    }
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let n: BigInt = digits.parse().ok()?;
    Some(BigRational::new(BigInt::from(sign) * n, BigInt::one()))
}
