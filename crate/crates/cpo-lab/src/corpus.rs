//! Corpus and preference-group files.
//!
//! Both formats are line-oriented UTF-8 with tab-separated fields and
//! space-separated decimal token ids:
//!
//! ```text
//! corpus line:  prefix ids <TAB> continuation ids      (continuation ends with 0)
//! group line:   prefix ids <TAB> TAG:ids <TAB> ... [<TAB> rank:i0 i1 ...]
//! ```
//!
//! Group lines carry one `TAG:ids` block per candidate (tags GT/AN/BN/MN/TN,
//! ground truth first) and an optional trailing `rank:` block holding the
//! attached ranking permutation. Every parse error reports its 1-based line
//! number.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::negatives::{PreferenceGroup, Provenance};
use crate::objectives::Ranking;
use crate::tokens::TokenSequence;

fn parse_ids(raw: &str, path: &Path, line: usize) -> Result<Vec<usize>> {
    raw.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("invalid token id {tok:?}"),
            })
        })
        .collect()
}

fn ids_to_string(ids: &[usize]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

/// Writes (prefix, continuation) pairs in the corpus format.
pub fn save_corpus(path: &Path, pairs: &[(TokenSequence, TokenSequence)]) -> Result<()> {
    let mut out = String::new();
    for (prefix, cont) in pairs {
        out.push_str(&ids_to_string(prefix.ids()));
        out.push('\t');
        out.push_str(&ids_to_string(cont.ids()));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a corpus file, validating shape and vocabulary on every line.
pub fn load_corpus(path: &Path, vocab_size: usize) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let mut fields = raw_line.split('\t');
        let (prefix_raw, cont_raw) = match (fields.next(), fields.next(), fields.next()) {
            (Some(p), Some(c), None) => (p, c),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: "expected exactly two tab-separated fields".into(),
                })
            }
        };
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let prefix = TokenSequence::new(parse_ids(prefix_raw, path, line)?)
            .map_err(|e| parse_err(format!("bad prefix: {e}")))?;
        if prefix.ends_with_eos() {
            return Err(parse_err("prefix may not contain EOS".into()));
        }
        let cont = TokenSequence::new(parse_ids(cont_raw, path, line)?)
            .map_err(|e| parse_err(format!("bad continuation: {e}")))?;
        if !cont.ends_with_eos() {
            return Err(parse_err("continuation must end with EOS (0)".into()));
        }
        prefix
            .check_vocab(vocab_size)
            .map_err(|e| parse_err(e.to_string()))?;
        cont.check_vocab(vocab_size)
            .map_err(|e| parse_err(e.to_string()))?;
        pairs.push((prefix, cont));
    }
    Ok(pairs)
}

/// Writes preference groups in the group-cache format (ranking included
/// when attached).
pub fn save_groups(path: &Path, groups: &[PreferenceGroup]) -> Result<()> {
    let mut out = String::new();
    for group in groups {
        group.validate()?;
        out.push_str(&ids_to_string(group.prefix.ids()));
        for (cand, prov) in group.candidates.iter().zip(&group.provenance) {
            out.push('\t');
            out.push_str(prov.tag());
            out.push(':');
            out.push_str(&ids_to_string(cand.ids()));
        }
        if let Some(ranking) = &group.ranking {
            out.push_str("\trank:");
            out.push_str(&ids_to_string(ranking.tau()));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a group-cache file back into validated preference groups.
pub fn load_groups(path: &Path, vocab_size: usize) -> Result<Vec<PreferenceGroup>> {
    let text = std::fs::read_to_string(path)?;
    let mut groups = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut fields = raw_line.split('\t');
        let prefix_raw = fields.next().expect("split yields at least one field");
        let prefix = TokenSequence::new(parse_ids(prefix_raw, path, line)?)
            .map_err(|e| parse_err(format!("bad prefix: {e}")))?;
        let mut candidates = Vec::new();
        let mut provenance = Vec::new();
        let mut ranking = None;
        for field in fields {
            let (tag, ids_raw) = field
                .split_once(':')
                .ok_or_else(|| parse_err(format!("block {field:?} is missing its tag")))?;
            if tag == "rank" {
                let tau = parse_ids(ids_raw, path, line)?;
                ranking = Some(
                    Ranking::new(tau).map_err(|e| parse_err(format!("bad ranking: {e}")))?,
                );
                continue;
            }
            let prov = Provenance::from_tag(tag)
                .ok_or_else(|| parse_err(format!("unknown provenance tag {tag:?}")))?;
            let cand = TokenSequence::new(parse_ids(ids_raw, path, line)?)
                .map_err(|e| parse_err(format!("bad candidate: {e}")))?;
            cand.check_vocab(vocab_size)
                .map_err(|e| parse_err(e.to_string()))?;
            candidates.push(cand);
            provenance.push(prov);
        }
        prefix
            .check_vocab(vocab_size)
            .map_err(|e| parse_err(e.to_string()))?;
        let group = PreferenceGroup {
            prefix,
            candidates,
            provenance,
            ranking,
        };
        group
            .validate()
            .map_err(|e| parse_err(format!("invalid group: {e}")))?;
        groups.push(group);
    }
    Ok(groups)
}
