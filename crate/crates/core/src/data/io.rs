//! Readers and writers for the on-disk interaction, concept and split files.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Layout of an interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFormat {
    /// `user \t item \t rating \t timestamp`, no header (MovieLens `u.data`).
    MovielensTsv,
    /// Tab-separated atomic file with a typed header line such as
    /// `user_id:token \t item_id:token \t rating:float \t timestamp:float`.
    AtomicTsv,
}

impl FromStr for InteractionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-tsv" => Ok(Self::MovielensTsv),
            "atomic-tsv" => Ok(Self::AtomicTsv),
            other => Err(Error::Config(format!("unknown interaction format `{other}`"))),
        }
    }
}

/// Layout of an item-concept file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptFormat {
    /// `item \t concept_name`, one row per membership.
    PairsTsv,
    /// MovieLens `u.item`: `|`-separated with trailing 0/1 genre flags.
    MovielensItem,
    /// Atomic item file with a header; concepts are the space-separated
    /// tokens of the `class` column.
    AtomicTsv,
}

impl FromStr for ConceptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs-tsv" => Ok(Self::PairsTsv),
            "movielens-item" => Ok(Self::MovielensItem),
            "atomic-tsv" => Ok(Self::AtomicTsv),
            other => Err(Error::Config(format!("unknown concept format `{other}`"))),
        }
    }
}

/// One implicit-feedback record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: String,
    pub item: String,
}

/// One item-to-concept membership.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemConcept {
    pub item: String,
    pub concept: String,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads an interaction file, keeping rows whose rating is at least
/// `min_rating`, and removes duplicate `(user, item)` pairs while preserving
/// first-seen order.
pub fn load_interactions(
    path: &Path,
    format: InteractionFormat,
    min_rating: f64,
) -> Result<Vec<Interaction>> {
    let lines = read_lines(path)?;
    let skip = match format {
        InteractionFormat::MovielensTsv => 0,
        InteractionFormat::AtomicTsv => 1,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut records = 0usize;
    for (idx, raw) in lines.iter().enumerate().skip(skip) {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(parse_error(
                path,
                line_no,
                format!("expected 4 tab-separated fields (user, item, rating, timestamp), found {}", fields.len()),
            ));
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_error(path, line_no, "empty user or item id"));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line_no, format!("invalid rating `{}`", fields[2])))?;
        fields[3]
            .trim()
            .parse::<f64>()
            .map_err(|_| parse_error(path, line_no, format!("invalid timestamp `{}`", fields[3])))?;
        records += 1;
        if rating < min_rating {
            continue;
        }
        let pair = Interaction {
            user: user.to_string(),
            item: item.to_string(),
        };
        if seen.insert(pair.clone()) {
            out.push(pair);
        }
    }
    if records == 0 {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(out)
}

/// MovieLens 100k genre columns, in file order.
pub const MOVIELENS_GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// Reads item-concept memberships. Duplicate rows are removed and rows whose
/// concept is listed in `exclude` are skipped.
pub fn load_item_concepts(
    path: &Path,
    format: ConceptFormat,
    exclude: &[String],
) -> Result<Vec<ItemConcept>> {
    let lines = read_lines(path)?;
    let mut rows = Vec::new();
    let mut class_col = None;
    for (idx, raw) in lines.iter().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match format {
            ConceptFormat::PairsTsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 2 || fields[0].trim().is_empty() || fields[1].trim().is_empty() {
                    return Err(parse_error(path, line_no, "expected `item \\t concept`"));
                }
                rows.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
            }
            ConceptFormat::MovielensItem => {
                let fields: Vec<&str> = line.split('|').collect();
                if fields.len() < 5 + MOVIELENS_GENRES.len() {
                    return Err(parse_error(
                        path,
                        line_no,
                        format!("expected {} `|`-separated fields", 5 + MOVIELENS_GENRES.len()),
                    ));
                }
                let flags = &fields[fields.len() - MOVIELENS_GENRES.len()..];
                for (flag, genre) in flags.iter().zip(MOVIELENS_GENRES) {
                    match flag.trim() {
                        "1" => rows.push((fields[0].trim().to_string(), genre.to_string())),
                        "0" => {}
                        other => {
                            return Err(parse_error(path, line_no, format!("invalid genre flag `{other}`")))
                        }
                    }
                }
            }
            ConceptFormat::AtomicTsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                let Some(col) = class_col else {
                    let pos = fields
                        .iter()
                        .position(|f| f.split(':').next() == Some("class"))
                        .ok_or_else(|| parse_error(path, line_no, "header lacks a `class` column"))?;
                    class_col = Some(pos);
                    continue;
                };
                let item = fields[0].trim();
                let classes = fields
                    .get(col)
                    .ok_or_else(|| parse_error(path, line_no, "missing class column"))?;
                for concept in classes.split_whitespace() {
                    rows.push((item.to_string(), concept.to_string()));
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    let mut seen = HashSet::new();
    Ok(rows
        .into_iter()
        .filter(|(_, c)| !exclude.contains(c))
        .map(|(item, concept)| ItemConcept { item, concept })
        .filter(|row| seen.insert(row.clone()))
        .collect())
}

/// Writes memberships in the `item \t concept` layout.
pub fn write_item_concepts(path: &Path, rows: &[ItemConcept]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        writeln!(w, "{}\t{}", row.item, row.concept).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes interactions in the four-column MovieLens layout with rating 1
/// and timestamp 0.
pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        writeln!(w, "{}\t{}\t1\t0", row.user, row.item).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file_with(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows_three_pairs() {
        let f = file_with("1\t10\t5\t100\n2\t10\t3\t101\n2\t11\t4\t102\n");
        let rows = load_interactions(f.path(), InteractionFormat::MovielensTsv, 1.0).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], Interaction { user: "2".into(), item: "11".into() });
    }

    #[test]
    fn duplicate_pairs_collapse() {
        let f = file_with("1\t10\t5\t100\n1\t10\t2\t200\n");
        let rows = load_interactions(f.path(), InteractionFormat::MovielensTsv, 1.0).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn missing_fields_report_line() {
        let f = file_with("a\tb\n");
        let err = load_interactions(f.path(), InteractionFormat::MovielensTsv, 1.0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = file_with("");
        assert!(matches!(
            load_interactions(f.path(), InteractionFormat::MovielensTsv, 1.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn rating_threshold_filters() {
        let f = file_with("1\t10\t5\t100\n1\t11\t2\t200\n");
        let rows = load_interactions(f.path(), InteractionFormat::MovielensTsv, 4.0).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn atomic_files_skip_header() {
        let f = file_with("user_id:token\titem_id:token\trating:float\ttimestamp:float\n7\t8\t3\t9\n");
        let rows = load_interactions(f.path(), InteractionFormat::AtomicTsv, 1.0).unwrap();
        assert_eq!(rows, vec![Interaction { user: "7".into(), item: "8".into() }]);

        let items = file_with(
            "item_id:token\tmovie_title:token_seq\trelease_year:token\tclass:token_seq\n1\tToy Story\t1995\tAnimation Comedy\n",
        );
        let rows = load_item_concepts(items.path(), ConceptFormat::AtomicTsv, &[]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].concept, "Comedy");
    }

    #[test]
    fn movielens_item_flags() {
        let flags = "0|1|0|0|0|1|0|0|0|0|0|0|0|0|0|0|0|0|0";
        let f = file_with(&format!("1|Toy Story (1995)|01-Jan-1995||http://x|{flags}\n"));
        let rows = load_item_concepts(f.path(), ConceptFormat::MovielensItem, &[]).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.concept.as_str()).collect();
        assert_eq!(names, ["Action", "Comedy"]);
    }

    #[test]
    fn excluded_concepts_are_dropped() {
        let f = file_with("1\tunknown\n1\tDrama\n1\tDrama\n");
        let rows = load_item_concepts(f.path(), ConceptFormat::PairsTsv, &["unknown".to_string()]).unwrap();
        assert_eq!(rows, vec![ItemConcept { item: "1".into(), concept: "Drama".into() }]);
    }
}
