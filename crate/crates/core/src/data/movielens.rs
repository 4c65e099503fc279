//! MovieLens-1M file ingestion.
//!
//! Formats, bit-exact:
//! - `ratings.dat`: `UserID::MovieID::Rating::Timestamp`
//! - `movies.dat`:  `MovieID::Title::Genre1|Genre2|...`
//! - `users.dat`:   `UserID::Gender::Age::Occupation::Zip-code`
//!
//! The distribution is Latin-1 encoded, not UTF-8; [`Encoding::Latin1`] is the
//! default and a flag selects UTF-8 for other corpora. Malformed lines are
//! counted and reported, never silently dropped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{Catalog, InteractionEvent, Item, User};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Latin1,
    Utf8,
}

#[derive(Debug, Clone)]
pub struct MovieLensPaths {
    pub ratings: PathBuf,
    pub movies: PathBuf,
    pub users: PathBuf,
}

impl MovieLensPaths {
    /// Standard layout inside an extracted `ml-1m/` directory.
    pub fn in_dir(dir: &Path) -> Self {
        MovieLensPaths {
            ratings: dir.join("ratings.dat"),
            movies: dir.join("movies.dat"),
            users: dir.join("users.dat"),
        }
    }
}

/// One skipped input line with its location and reason.
#[derive(Debug, Clone)]
pub struct MalformedLine {
    pub file: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub parsed_events: usize,
    pub parsed_items: usize,
    pub parsed_users: usize,
    pub malformed: Vec<MalformedLine>,
}

/// MovieLens-1M occupation codes, from the dataset documentation.
const OCCUPATIONS: [&str; 21] = [
    "other",
    "academic/educator",
    "artist",
    "clerical/admin",
    "college/grad student",
    "customer service",
    "doctor/health care",
    "executive/managerial",
    "farmer",
    "homemaker",
    "K-12 student",
    "lawyer",
    "programmer",
    "retired",
    "sales/marketing",
    "scientist",
    "self-employed",
    "technician/engineer",
    "tradesman/craftsman",
    "unemployed",
    "writer",
];

/// MovieLens-1M age buckets.
fn age_bucket(code: u32) -> &'static str {
    match code {
        1 => "under 18",
        18 => "18-24",
        25 => "25-34",
        35 => "35-44",
        45 => "45-49",
        50 => "50-55",
        56 => "56+",
        _ => "unknown",
    }
}

fn decode(bytes: &[u8], encoding: Encoding, file: &str) -> Result<String> {
    match encoding {
        Encoding::Latin1 => Ok(bytes.iter().map(|&b| b as char).collect()),
        Encoding::Utf8 => String::from_utf8(bytes.to_vec()).map_err(|e| Error::Load {
            file: file.to_string(),
            line: 0,
            message: format!("not valid UTF-8: {e}"),
        }),
    }
}

fn read_lines(path: &Path, encoding: Encoding) -> Result<Vec<String>> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        file: name.clone(),
        line: 0,
        message: format!("cannot read file: {e}"),
    })?;
    let text = decode(&bytes, encoding, &name)?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Load the three MovieLens-1M files into catalogs plus the raw event list.
///
/// Events referencing ids missing from the catalogs are reported as malformed
/// and skipped, so the returned stream satisfies the referential invariant.
pub fn load_movielens_1m(paths: &MovieLensPaths, encoding: Encoding) -> Result<(Catalog, Vec<InteractionEvent>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut catalog = Catalog::default();

    let movies_name = paths.movies.display().to_string();
    for (idx, line) in read_lines(&paths.movies, encoding)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        match parse_movie_line(line) {
            Ok(item) => {
                catalog.items.insert(item.item_id, item);
                report.parsed_items += 1;
            }
            Err(message) => report.malformed.push(MalformedLine {
                file: movies_name.clone(),
                line: idx + 1,
                message,
            }),
        }
    }

    let users_name = paths.users.display().to_string();
    for (idx, line) in read_lines(&paths.users, encoding)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        match parse_user_line(line) {
            Ok(user) => {
                catalog.users.insert(user.user_id, user);
                report.parsed_users += 1;
            }
            Err(message) => report.malformed.push(MalformedLine {
                file: users_name.clone(),
                line: idx + 1,
                message,
            }),
        }
    }

    let ratings_name = paths.ratings.display().to_string();
    let mut events = Vec::new();
    for (idx, line) in read_lines(&paths.ratings, encoding)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        match parse_rating_line(line, events.len()) {
            Ok(event) => {
                if !catalog.users.contains_key(&event.user_id) {
                    report.malformed.push(MalformedLine {
                        file: ratings_name.clone(),
                        line: idx + 1,
                        message: format!("unknown user id {}", event.user_id),
                    });
                } else if !catalog.items.contains_key(&event.item_id) {
                    report.malformed.push(MalformedLine {
                        file: ratings_name.clone(),
                        line: idx + 1,
                        message: format!("unknown item id {}", event.item_id),
                    });
                } else {
                    events.push(event);
                    report.parsed_events += 1;
                }
            }
            Err(message) => report.malformed.push(MalformedLine {
                file: ratings_name.clone(),
                line: idx + 1,
                message,
            }),
        }
    }

    Ok((catalog, events, report))
}

fn parse_rating_line(line: &str, seq: usize) -> std::result::Result<InteractionEvent, String> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 `::`-delimited fields, got {}", fields.len()));
    }
    let user_id = fields[0].parse::<u32>().map_err(|_| format!("bad user id `{}`", fields[0]))?;
    let item_id = fields[1].parse::<u32>().map_err(|_| format!("bad movie id `{}`", fields[1]))?;
    let rating = fields[2].parse::<f64>().map_err(|_| format!("bad rating `{}`", fields[2]))?;
    let timestamp = fields[3].parse::<i64>().map_err(|_| format!("bad timestamp `{}`", fields[3]))?;
    Ok(InteractionEvent {
        user_id,
        item_id,
        rating,
        timestamp,
        seq,
    })
}

fn parse_movie_line(line: &str) -> std::result::Result<Item, String> {
    let mut fields = line.splitn(3, "::");
    let id = fields.next().ok_or("missing movie id")?;
    let title = fields.next().ok_or("missing title field")?;
    let genres = fields.next().ok_or("missing genres field")?;
    let item_id = id.parse::<u32>().map_err(|_| format!("bad movie id `{id}`"))?;
    let genre_values: Vec<String> = genres
        .split('|')
        .filter(|g| !g.is_empty())
        .map(|g| g.to_string())
        .collect();
    Ok(Item {
        item_id,
        title: title.to_string(),
        attributes: vec![("genres".to_string(), genre_values)],
    })
}

fn parse_user_line(line: &str) -> std::result::Result<User, String> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 `::`-delimited fields, got {}", fields.len()));
    }
    let user_id = fields[0].parse::<u32>().map_err(|_| format!("bad user id `{}`", fields[0]))?;
    let gender = match fields[1] {
        "F" => "female",
        "M" => "male",
        other => return Err(format!("bad gender `{other}`")),
    };
    let age_code = fields[2].parse::<u32>().map_err(|_| format!("bad age `{}`", fields[2]))?;
    let occ_code = fields[3].parse::<usize>().map_err(|_| format!("bad occupation `{}`", fields[3]))?;
    let occupation = OCCUPATIONS.get(occ_code).copied().unwrap_or("other");
    Ok(User {
        user_id,
        profile: vec![
            ("gender".to_string(), gender.to_string()),
            ("age".to_string(), age_bucket(age_code).to_string()),
            ("occupation".to_string(), occupation.to_string()),
            // zip-code is retained for completeness but is a pure-ID field;
            // prompt templates are forbidden from referencing it
            ("zipcode".to_string(), fields[4].to_string()),
        ],
    })
}

/// Import a precomputed semantic-vector file: one record per line,
/// `item_id<TAB>v1,v2,...` with decimal floats.
pub fn load_vector_file(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        file: name.clone(),
        line: 0,
        message: format!("cannot read file: {e}"),
    })?;
    let mut out = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Load {
            file: name.clone(),
            line: idx + 1,
            message,
        };
        let (id_part, vec_part) = line.split_once('\t').ok_or_else(|| err("missing tab separator".into()))?;
        let item_id = id_part.parse::<u32>().map_err(|_| err(format!("bad item id `{id_part}`")))?;
        let values = vec_part
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad float `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(d) = dim {
            if values.len() != d {
                return Err(err(format!("dimension {} differs from first record {}", values.len(), d)));
            }
        } else {
            dim = Some(values.len());
        }
        out.insert(item_id, values);
    }
    Ok(out)
}

/// Write vectors in the same `item_id<TAB>v1,v2,...` format.
pub fn write_vector_file(path: &Path, vectors: &BTreeMap<u32, Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    for (id, v) in vectors {
        let joined: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
        out.push_str(&format!("{id}\t{}\n", joined.join(",")));
    }
    std::fs::write(path, out)?;
    Ok(())
}
