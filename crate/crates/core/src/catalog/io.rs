use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CatalogConfig, Dataset, Interaction, Item, ItemId, UserId};
use crate::{Error, Matrix, Result};

pub const SCHEMA_VERSION: &str = "v1";
const MAGIC: &str = "#fpl-dataset";

/// Writes the line-delimited dataset format.
///
/// ```text
/// #fpl-dataset v1 <config-digest>
/// C item_count=200 user_count=1000 ...
/// I <id> <cat> <tok...> | <patch floats...>
/// X <user> <item> <pos> <provenance> <split>
/// ```
pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render(d)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub(crate) fn render(d: &Dataset) -> String {
    let config_line = config_line(&d.config);
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {SCHEMA_VERSION} {}", digest(&config_line));
    out.push_str(&config_line);
    out.push('\n');
    for item in &d.items {
        let _ = write!(out, "I {} {}", item.id, item.category);
        for t in &item.text {
            let _ = write!(out, " {t}");
        }
        out.push_str(" |");
        for v in item.patches.as_slice() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    for x in &d.interactions {
        let _ = writeln!(
            out,
            "X {} {} {} {} {}",
            x.user, x.item, x.position, x.provenance, x.split
        );
    }
    out
}

pub(crate) fn parse(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&MAGIC) || fields.len() != 3 {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected `{MAGIC} <version> <digest>` header"),
        });
    }
    if fields[1] != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: fields[1].to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    let (line_no, config_text) = lines.next().ok_or(Error::Parse {
        line: 2,
        message: "missing config line".into(),
    })?;
    if digest(config_text) != fields[2] {
        return Err(Error::Parse {
            line: line_no,
            message: "config digest does not match header".into(),
        });
    }
    let config = parse_config(line_no, config_text)?;

    let mut items = Vec::new();
    let mut interactions = Vec::new();
    for (line, raw) in lines {
        let bad = |message: String| Error::Parse { line, message };
        if raw.trim().is_empty() {
            continue;
        }
        let mut tokens = raw.split_whitespace();
        match tokens.next() {
            Some("I") => {
                let id: u32 = field(&mut tokens, line, "item id")?;
                let category: u32 = field(&mut tokens, line, "category")?;
                let mut text = Vec::with_capacity(config.text_len);
                let mut saw_bar = false;
                for tok in tokens.by_ref() {
                    if tok == "|" {
                        saw_bar = true;
                        break;
                    }
                    text.push(
                        tok.parse::<u32>()
                            .map_err(|e| bad(format!("token {tok:?}: {e}")))?,
                    );
                }
                if !saw_bar {
                    return Err(bad("item line is missing the `|` separator".into()));
                }
                let values = tokens
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|e| bad(format!("patch value {v:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if text.len() != config.text_len {
                    return Err(bad(format!(
                        "expected {} tokens, found {}",
                        config.text_len,
                        text.len()
                    )));
                }
                let patches = Matrix::new(config.patch_count, config.patch_dim, values)
                    .map_err(|e| bad(format!("patch matrix: {e}")))?;
                items.push(Item {
                    id: ItemId(id),
                    category,
                    text,
                    patches,
                });
            }
            Some("X") => {
                let user: u32 = field(&mut tokens, line, "user")?;
                let item: u32 = field(&mut tokens, line, "item")?;
                let position: u32 = field(&mut tokens, line, "position")?;
                let provenance = field(&mut tokens, line, "provenance")?;
                let split = field(&mut tokens, line, "split")?;
                if tokens.next().is_some() {
                    return Err(bad("trailing fields on interaction line".into()));
                }
                interactions.push(Interaction {
                    user: UserId(user),
                    item: ItemId(item),
                    position,
                    provenance,
                    split,
                });
            }
            Some(other) => return Err(bad(format!("unknown record type {other:?}"))),
            None => unreachable!("blank lines are skipped"),
        }
    }
    if items.len() != config.item_count {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: format!(
                "expected {} items, found {} (truncated file?)",
                config.item_count,
                items.len()
            ),
        });
    }

    let users = (0..config.user_count as u32).map(UserId).collect();
    let d = Dataset {
        config,
        items,
        users,
        interactions,
    };
    d.validate().map_err(|e| Error::Parse {
        line: text.lines().count(),
        message: e.to_string(),
    })?;
    Ok(d)
}

fn field<'a, T>(tokens: &mut impl Iterator<Item = &'a str>, line: usize, name: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    let raw = tokens.next().ok_or_else(|| Error::Parse {
        line,
        message: format!("missing {name}"),
    })?;
    raw.parse().map_err(|e| Error::Parse {
        line,
        message: format!("{name} {raw:?}: {e}"),
    })
}

fn config_line(c: &CatalogConfig) -> String {
    format!(
        "C item_count={} user_count={} category_count={} text_len={} patch_count={} patch_dim={} \
         vocab_size={} history_min={} history_max={} popularity_skew={} few_shot_count={} seed={}",
        c.item_count,
        c.user_count,
        c.category_count,
        c.text_len,
        c.patch_count,
        c.patch_dim,
        c.vocab_size,
        c.history_min,
        c.history_max,
        c.popularity_skew,
        c.few_shot_count,
        c.seed
    )
}

fn parse_config(line: usize, text: &str) -> Result<CatalogConfig> {
    let bad = |message: String| Error::Parse { line, message };
    let mut rest = text.split_whitespace();
    if rest.next() != Some("C") {
        return Err(bad("expected config line starting with `C`".into()));
    }
    let mut c = CatalogConfig::default();
    let mut seen = 0;
    for kv in rest {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
        match k {
            "item_count" => c.item_count = num(v)?,
            "user_count" => c.user_count = num(v)?,
            "category_count" => c.category_count = num(v)?,
            "text_len" => c.text_len = num(v)?,
            "patch_count" => c.patch_count = num(v)?,
            "patch_dim" => c.patch_dim = num(v)?,
            "vocab_size" => c.vocab_size = num(v)?,
            "history_min" => c.history_min = num(v)?,
            "history_max" => c.history_max = num(v)?,
            "few_shot_count" => c.few_shot_count = num(v)?,
            "popularity_skew" => {
                c.popularity_skew = v.parse().map_err(|e| bad(format!("{k}: {e}")))?
            }
            "seed" => c.seed = v.parse().map_err(|e| bad(format!("{k}: {e}")))?,
            other => return Err(bad(format!("unknown config key {other:?}"))),
        }
        seen += 1;
    }
    if seen != 12 {
        return Err(bad(format!("config line has {seen} of 12 keys")));
    }
    Ok(c)
}

fn digest(config_line: &str) -> String {
    let hash = Sha256::digest(config_line.as_bytes());
    hex::encode(&hash[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, generate_interactions, Setting};
    use proptest::prelude::*;

    fn dataset(items: usize, users: usize, seed: u64) -> Dataset {
        let cfg = CatalogConfig {
            item_count: items,
            user_count: users,
            category_count: 2,
            history_min: 3,
            history_max: 6,
            seed,
            ..CatalogConfig::default()
        };
        let cat = generate_catalog(&cfg).unwrap();
        generate_interactions(&cfg, &cat, Setting::ZeroShot, &[ItemId(1)].into()).unwrap()
    }

    #[test]
    fn round_trip_through_a_file() {
        let d = dataset(10, 8, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        write_dataset(&d, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), d);
    }

    #[test]
    fn truncated_file_names_a_line() {
        let text = render(&dataset(10, 8, 2));
        let cut: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        match parse(&cut) {
            Err(Error::Parse { line, .. }) => assert!(line >= 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        // A line cut mid-record fails on that line.
        let mut lines: Vec<&str> = text.lines().collect();
        let half = &lines[3][..lines[3].len() / 2];
        lines[3] = half;
        match parse(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn schema_version_mismatch_is_reported() {
        let text = render(&dataset(10, 8, 3)).replacen(" v1 ", " v9 ", 1);
        assert!(matches!(
            parse(&text),
            Err(Error::SchemaVersion { found, .. }) if found == "v9"
        ));
    }

    #[test]
    fn unknown_records_are_rejected() {
        let text = format!("{}Q 1 2 3\n", render(&dataset(10, 8, 4)));
        assert!(matches!(parse(&text), Err(Error::Parse { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn render_parse_is_identity(seed in 0u64..1000, users in 4usize..20) {
            let d = dataset(12, users, seed);
            prop_assert_eq!(parse(&render(&d)).unwrap(), d);
        }
    }
}
