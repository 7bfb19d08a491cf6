//! Canonical JSON: object keys sorted, no insignificant whitespace, and every
//! non-integer number written with 17 significant digits.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;
use crate::measurement::fmt_real;

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                out.push_str(&i.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                out.push_str(&fmt_real(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Sample {
        zeta: f64,
        alpha: Vec<f64>,
        count: usize,
        name: String,
    }

    #[test]
    fn keys_sorted_and_reals_round_trip() {
        let s = Sample {
            zeta: 0.1 + 0.2,
            alpha: vec![1.0 / 3.0, -2.5e-17],
            count: 3,
            name: "a\"b".into(),
        };
        let text = to_canonical_json(&s).unwrap();
        assert!(text.starts_with("{\"alpha\":[3.3333333333333331e-1,"));
        assert!(text.contains("\"count\":3,"));
        let back: Sample = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
