//! Line-based architecture format.
//!
//! ```text
//! # arch: tiny
//! input 3
//! conv c1 k=3 s=1 d=1 p=1 ch=16 from=input
//! bn b1 from=c1
//! relu r1 from=b1
//! maxpool m1 k=2 s=2 from=r1
//! gap g from=m1
//! dense fc out=10 from=g
//! softmax prob from=fc
//! ```
//!
//! Every line declares one node. `from=` names earlier or later nodes; `add` and
//! `concat` take a comma-separated list. `#` starts a comment; a leading
//! `# arch: <name>` comment names the graph.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::graph::{ArchGraph, LayerKind, NodeSpec};
use super::ArchError;

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    out
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> ArchError {
    ArchError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

struct Decl {
    line: usize,
    from_column: usize,
}

/// Parses an architecture document into a validated graph.
pub fn parse_arch(text: &str) -> Result<ArchGraph, ArchError> {
    let mut name = String::from("unnamed");
    let mut specs = Vec::new();
    let mut decls = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (body, comment) = match raw.find('#') {
            Some(pos) => (&raw[..pos], Some(&raw[pos + 1..])),
            None => (raw, None),
        };
        if specs.is_empty() && body.trim().is_empty() {
            if let Some(meta) = comment.and_then(|c| c.trim().strip_prefix("arch:")) {
                name = meta.trim().to_string();
            }
        }
        let tokens = tokenize(body);
        let Some(head) = tokens.first() else {
            continue;
        };
        let kind = LayerKind::from_keyword(head.text).ok_or_else(|| ArchError::UnknownKind {
            line: line_no,
            column: head.column,
            kind: head.text.to_string(),
        })?;
        let (spec, from_column) = parse_decl(kind, &tokens, line_no)?;
        specs.push(spec);
        decls.push(Decl {
            line: line_no,
            from_column,
        });
    }

    let at = |i: usize, column: usize, err: ArchError| ArchError::AtLine {
        line: decls[i].line,
        column,
        source: Box::new(err),
    };

    // Resolve names here so dangling references carry a position.
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, s) in specs.iter().enumerate() {
        if seen.insert(s.name.as_str(), i).is_some() {
            return Err(at(i, 1, ArchError::DuplicateName(s.name.clone())));
        }
    }
    for (i, s) in specs.iter().enumerate() {
        for target in &s.from {
            if !seen.contains_key(target.as_str()) {
                return Err(at(
                    i,
                    decls[i].from_column,
                    ArchError::DanglingReference {
                        node: s.name.clone(),
                        target: target.clone(),
                    },
                ));
            }
        }
    }

    ArchGraph::from_specs(name, &specs).map_err(|err| {
        let node = match &err {
            ArchError::Cycle(n)
            | ArchError::MultipleInputs(n)
            | ArchError::Orphan(n)
            | ArchError::DuplicateName(n)
            | ArchError::Invalid { node: n, .. } => Some(n.clone()),
            _ => None,
        };
        match node.and_then(|n| seen.get(n.as_str()).copied()) {
            Some(i) => at(i, 1, err),
            None => err,
        }
    })
}

fn parse_decl(kind: LayerKind, tokens: &[Token<'_>], line: usize) -> Result<(NodeSpec, usize), ArchError> {
    if kind == LayerKind::Input {
        let (name, count) = match tokens.len() {
            2 => ("input", &tokens[1]),
            3 => (tokens[1].text, &tokens[2]),
            _ => {
                return Err(syntax(
                    line,
                    tokens[0].column,
                    "expected `input <channels>`",
                ))
            }
        };
        if !valid_name(name) {
            return Err(syntax(line, tokens[1].column, format!("invalid node name `{name}`")));
        }
        let channels: usize = count
            .text
            .parse()
            .map_err(|_| syntax(line, count.column, format!("expected channel count, found `{}`", count.text)))?;
        let spec = NodeSpec {
            name: name.to_string(),
            ..NodeSpec::input(channels)
        };
        return Ok((spec, 1));
    }

    let name_tok = tokens
        .get(1)
        .ok_or_else(|| syntax(line, tokens[0].column + tokens[0].text.len(), "missing node name"))?;
    if name_tok.text.contains('=') || !valid_name(name_tok.text) {
        return Err(syntax(
            line,
            name_tok.column,
            format!("invalid node name `{}`", name_tok.text),
        ));
    }
    let mut spec = NodeSpec::new(kind, name_tok.text);

    let allowed: &[&str] = match kind {
        LayerKind::Conv => &["k", "s", "d", "p", "ch", "from"],
        LayerKind::MaxPool | LayerKind::AvgPool => &["k", "s", "p", "from"],
        LayerKind::Dense => &["out", "from"],
        _ => &["from"],
    };
    let mut seen_keys: Vec<&str> = Vec::new();
    let mut from_column = name_tok.column;
    let mut stride_given = false;

    for tok in &tokens[2..] {
        let (key, value) = tok
            .text
            .split_once('=')
            .ok_or_else(|| syntax(line, tok.column, format!("expected key=value, found `{}`", tok.text)))?;
        if !allowed.contains(&key) {
            return Err(syntax(line, tok.column, format!("unknown attribute `{key}` for {kind}")));
        }
        if seen_keys.contains(&key) {
            return Err(syntax(line, tok.column, format!("duplicate attribute `{key}`")));
        }
        seen_keys.push(key);
        let value_column = tok.column + key.len() + 1;
        if key == "from" {
            from_column = value_column;
            let names: Vec<String> = value.split(',').map(str::to_string).collect();
            if names.iter().any(|n| !valid_name(n)) {
                return Err(syntax(line, value_column, format!("invalid reference list `{value}`")));
            }
            spec.from = names;
            continue;
        }
        let n: usize = value
            .parse()
            .map_err(|_| syntax(line, value_column, format!("expected integer for `{key}`, found `{value}`")))?;
        match key {
            "k" => spec.kernel = n,
            "s" => {
                spec.stride = n;
                stride_given = true;
            }
            "d" => spec.dilation = n,
            "p" => spec.padding = n,
            "ch" | "out" => spec.channels = Some(n),
            _ => unreachable!(),
        }
    }

    let end = tokens.last().map(|t| t.column + t.text.len()).unwrap_or(1);
    if !seen_keys.contains(&"from") {
        return Err(syntax(line, end, "missing `from=`"));
    }
    let required: &[&str] = match kind {
        LayerKind::Conv => &["k", "ch"],
        LayerKind::MaxPool | LayerKind::AvgPool => &["k"],
        LayerKind::Dense => &["out"],
        _ => &[],
    };
    for key in required {
        if !seen_keys.contains(key) {
            return Err(syntax(line, end, format!("missing `{key}=`")));
        }
    }
    if matches!(kind, LayerKind::MaxPool | LayerKind::AvgPool) && !stride_given {
        spec.stride = spec.kernel;
    }
    for (key, v) in [("k", spec.kernel), ("s", spec.stride), ("d", spec.dilation)] {
        if v == 0 {
            return Err(syntax(line, 1, format!("`{key}` must be at least 1")));
        }
    }
    Ok((spec, from_column))
}

/// Hex SHA-256 of the canonical text form. Identifies the architecture of a run.
pub fn graph_hash(graph: &ArchGraph) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(to_dsl(graph).as_bytes()))
}

/// Serializes a graph in declaration order; [`parse_arch`] reads it back.
pub fn to_dsl(graph: &ArchGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# arch: {}", graph.name);
    for spec in graph.to_specs() {
        let from = spec.from.join(",");
        let ch = spec.channels.unwrap_or(0);
        let _ = match spec.kind {
            LayerKind::Input if spec.name == "input" => writeln!(out, "input {ch}"),
            LayerKind::Input => writeln!(out, "input {} {ch}", spec.name),
            LayerKind::Conv => writeln!(
                out,
                "conv {} k={} s={} d={} p={} ch={ch} from={from}",
                spec.name, spec.kernel, spec.stride, spec.dilation, spec.padding
            ),
            LayerKind::MaxPool | LayerKind::AvgPool => writeln!(
                out,
                "{} {} k={} s={} p={} from={from}",
                spec.kind, spec.name, spec.kernel, spec.stride, spec.padding
            ),
            LayerKind::Dense => writeln!(out, "dense {} out={ch} from={from}", spec.name),
            kind => writeln!(out, "{kind} {} from={from}", spec.name),
        };
    }
    out
}
