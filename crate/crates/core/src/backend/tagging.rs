//! Token-level edit tags: every input token is kept, deleted, replaced by a
//! phrase, or kept with a phrase appended. Applying the tags to the input
//! tokens reproduces the target.

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Edit {
    Keep,
    Delete,
    Append(Vec<String>),
    Replace(Vec<String>),
}

pub const KEEP: &str = "$KEEP";
pub const DELETE: &str = "$DELETE";
const APPEND: &str = "$APPEND";
const REPLACE: &str = "$REPLACE";

impl Edit {
    /// Label string used as the output class name.
    pub fn encode(&self) -> String {
        match self {
            Edit::Keep => KEEP.to_string(),
            Edit::Delete => DELETE.to_string(),
            Edit::Append(p) => format!("{APPEND} {}", p.join(" ")),
            Edit::Replace(p) => format!("{REPLACE} {}", p.join(" ")),
        }
    }

    pub fn decode(label: &str) -> Option<Edit> {
        let mut parts = label.split(' ');
        let head = parts.next()?;
        let phrase: Vec<String> = parts.map(str::to_string).collect();
        match head {
            KEEP if phrase.is_empty() => Some(Edit::Keep),
            DELETE if phrase.is_empty() => Some(Edit::Delete),
            APPEND if !phrase.is_empty() => Some(Edit::Append(phrase)),
            REPLACE if !phrase.is_empty() => Some(Edit::Replace(phrase)),
            _ => None,
        }
    }

    fn from_output(token: &str, output: Vec<String>) -> Edit {
        match output.split_first() {
            None => Edit::Delete,
            Some((first, rest)) if first == token => {
                if rest.is_empty() {
                    Edit::Keep
                } else {
                    Edit::Append(rest.to_vec())
                }
            }
            Some(_) => Edit::Replace(output),
        }
    }
}

/// Minimum-edit alignment of `input` onto `target`, expressed as one tag
/// per input token. Among equal-cost alignments, matches are taken first,
/// then deletions, so target tokens align to the earliest input span.
pub fn edit_tags(input: &[&str], target: &[&str]) -> Vec<Edit> {
    let (n, m) = (input.len(), target.len());
    if n == 0 {
        return Vec::new();
    }
    // cost[i][j]: edit distance between input[i..] and target[j..]
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let diag = cost[i + 1][j + 1] + usize::from(input[i] != target[j]);
                diag.min(1 + cost[i + 1][j]).min(1 + cost[i][j + 1])
            };
        }
    }
    let mut outputs: Vec<Vec<String>> = vec![Vec::new(); n];
    let mut prefix: Vec<String> = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = cost[i][j];
        if i < n && j < m && input[i] == target[j] && here == cost[i + 1][j + 1] {
            outputs[i].push(target[j].to_string());
            i += 1;
            j += 1;
        } else if i < n && here == 1 + cost[i + 1][j] {
            i += 1;
        } else if i < n && j < m && here == 1 + cost[i + 1][j + 1] {
            outputs[i].push(target[j].to_string());
            i += 1;
            j += 1;
        } else {
            let tok = target[j].to_string();
            if i == 0 {
                prefix.push(tok);
            } else {
                outputs[i - 1].push(tok);
            }
            j += 1;
        }
    }
    if !prefix.is_empty() {
        prefix.append(&mut outputs[0]);
        outputs[0] = prefix;
    }
    input
        .iter()
        .zip(outputs)
        .map(|(tok, out)| Edit::from_output(tok, out))
        .collect()
}

/// Applies tags to input tokens. Missing tags (input longer than the tag
/// list) delete the remaining tokens.
pub fn apply_tags(input: &[&str], tags: &[Edit]) -> Vec<String> {
    let mut out = Vec::new();
    for (tok, tag) in input.iter().zip(tags) {
        match tag {
            Edit::Keep => out.push(tok.to_string()),
            Edit::Delete => {}
            Edit::Append(p) => {
                out.push(tok.to_string());
                out.extend(p.iter().cloned());
            }
            Edit::Replace(p) => out.extend(p.iter().cloned()),
        }
    }
    out
}
