use serde::Serialize;

/// Machine-readable error written to standard error.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: String) -> Self {
        Self { kind: "usage".into(), message }
    }

    pub fn core(e: &cce_threshold::Error) -> Self {
        let debug = format!("{e:?}");
        let kind = debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error");
        Self { kind: to_snake(kind), message: e.to_string() }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        Self { kind: "io".into(), message: format!("{context}: {e}") }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<cce_threshold::Error> for Failure {
    fn from(e: cce_threshold::Error) -> Self {
        Failure::core(&e)
    }
}

fn to_snake(camel: &str) -> String {
    let mut out = String::new();
    for (i, c) in camel.chars().enumerate() {
        if c.is_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}
