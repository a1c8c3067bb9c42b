use serde_json::Value;

use crate::ApiError;

const NON_FINITE: [&str; 4] = ["-Infinity", "Infinity", "-NaN", "NaN"];

/// Parses JSON that may contain the bare tokens `NaN`, `Infinity` and `-Infinity`
/// (as emitted by JavaScript and Python), turning each into `null`.
pub fn parse_lenient(body: &[u8]) -> Result<Value, ApiError> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::BadRequest("body is not UTF-8".into()))?;
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut in_string = false;
    while let Some(c) = rest.chars().next() {
        if in_string {
            match c {
                '\\' => {
                    let mut it = rest.chars();
                    out.push(it.next().unwrap());
                    if let Some(n) = it.next() {
                        out.push(n);
                    }
                    rest = it.as_str();
                    continue;
                }
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '"' {
            in_string = true;
        } else if let Some(tok) = NON_FINITE.iter().find(|t| rest.starts_with(**t)) {
            out.push_str("null");
            rest = &rest[tok.len()..];
            continue;
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    serde_json::from_str(&out).map_err(|e| ApiError::BadRequest(e.to_string()))
}
