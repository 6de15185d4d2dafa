//! Pulling a JSON payload out of free-form model output.
//!
//! Models wrap JSON in code fences, prepend chatter, and copy trailing commas
//! from prompt examples. The helpers here tolerate exactly those three things
//! and nothing else.

use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Object,
    Array,
    Any,
}

/// Finds the first balanced JSON value of the requested shape and parses it,
/// dropping trailing commas before closing brackets.
pub fn extract_json(raw: &str, shape: Shape) -> Result<Value, String> {
    let body = strip_code_fences(raw.trim());
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        if shape_matches(&v, shape) {
            return Ok(v);
        }
    }
    let span = first_balanced(body, shape).ok_or_else(|| match shape {
        Shape::Object => "no JSON object found".to_string(),
        Shape::Array => "no JSON array found".to_string(),
        Shape::Any => "no JSON value found".to_string(),
    })?;
    let cleaned = strip_trailing_commas(span);
    serde_json::from_str::<Value>(&cleaned).map_err(|e| format!("invalid JSON: {e}"))
}

/// Every top-level balanced JSON object in order, for payloads that list
/// objects without an enclosing array.
pub fn extract_objects(raw: &str) -> Vec<Value> {
    let body = strip_code_fences(raw.trim());
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = body[from..].find('{') {
        let start = from + rel;
        match balanced_end(&body[start..]) {
            Some(len) => {
                if let Ok(v) = serde_json::from_str::<Value>(&strip_trailing_commas(&body[start..start + len])) {
                    out.push(v);
                }
                from = start + len;
            }
            None => from = start + 1,
        }
    }
    out
}

fn shape_matches(v: &Value, shape: Shape) -> bool {
    match shape {
        Shape::Object => v.is_object(),
        Shape::Array => v.is_array(),
        Shape::Any => v.is_object() || v.is_array(),
    }
}

fn strip_code_fences(s: &str) -> &str {
    let Some(start) = s.find("```") else {
        return s;
    };
    let after = &s[start + 3..];
    // skip the info string (```json)
    let after = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after,
    };
    match after.find("```") {
        Some(end) => after[..end].trim(),
        None => after.trim(),
    }
}

fn first_balanced(s: &str, shape: Shape) -> Option<&str> {
    let opens: &[char] = match shape {
        Shape::Object => &['{'],
        Shape::Array => &['['],
        Shape::Any => &['{', '['],
    };
    let mut search_from = 0;
    while let Some(rel) = s[search_from..].find(|c: char| opens.contains(&c)) {
        let start = search_from + rel;
        if let Some(end) = balanced_end(&s[start..]) {
            return Some(&s[start..start + end]);
        }
        search_from = start + 1;
    }
    None
}

/// Byte length of the balanced value starting at `s[0]`.
fn balanced_end(s: &str) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut esc = false;
    for (i, ch) in s.char_indices() {
        if in_str {
            if esc {
                esc = false;
            } else if ch == '\\' {
                esc = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' | '[' => stack.push(ch),
            '}' | ']' => {
                let open = stack.pop()?;
                if (open == '{') != (ch == '}') {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_trailing_commas(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let chars: Vec<char> = s.chars().collect();
    let mut in_str = false;
    let mut esc = false;
    for (i, &ch) in chars.iter().enumerate() {
        if in_str {
            out.push(ch);
            if esc {
                esc = false;
            } else if ch == '\\' {
                esc = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        if ch == '"' {
            in_str = true;
        }
        if ch == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(ch);
    }
    out
}
