//! MovieLens ingestion for the 100K (tab/pipe separated) and 1M (`::`
//! separated) layouts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Occupation vocabulary of ML-100K, in the order of its `u.occupation` file.
pub const ML100K_OCCUPATIONS: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

pub const NUM_OCCUPATIONS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `user\titem\trating\ttimestamp` with `user|age|gender|occupation|zip` profiles.
    #[serde(alias = "ml-100k", alias = "tab-separated-100k")]
    Ml100k,
    /// `user::item::rating::timestamp` with `user::gender::age::occupation::zip` profiles.
    #[serde(alias = "ml-1m", alias = "double-colon-1m")]
    Ml1m,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    /// Class index used for labels and the one-hot slot: F = 0, M = 1.
    pub fn index(self) -> usize {
        match self {
            Gender::Female => 0,
            Gender::Male => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u32,
    pub item_id: u32,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub user_id: u32,
    pub age: u32,
    pub gender: Gender,
    pub occupation: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines_read: usize,
    pub duplicates: usize,
    pub rejected_ratings: usize,
    pub users_without_profile: usize,
    pub profiles_without_ratings: usize,
}

/// A reindexed dataset: user ids are `0..users`, item ids `0..items`.
#[derive(Debug, Clone)]
pub struct MovieLens {
    pub interactions: Vec<Interaction>,
    pub profiles: Vec<UserProfile>,
    pub user_raw_ids: Vec<u64>,
    pub item_raw_ids: Vec<u64>,
    pub occupations: Vec<String>,
    pub report: LoadReport,
}

impl MovieLens {
    pub fn num_users(&self) -> usize {
        self.profiles.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_raw_ids.len()
    }

    /// Interactions grouped per user, in file order.
    pub fn by_user(&self) -> Vec<Vec<Interaction>> {
        let mut out = vec![Vec::new(); self.num_users()];
        for it in &self.interactions {
            out[it.user_id as usize].push(*it);
        }
        out
    }

    /// Tab-separated `index\tname` sidecar for the occupation vocabulary.
    pub fn occupation_sidecar(&self) -> String {
        self.occupations
            .iter()
            .enumerate()
            .map(|(i, name)| format!("{i}\t{name}\n"))
            .collect()
    }
}

struct RawRating {
    user: u64,
    item: u64,
    rating: u8,
    timestamp: i64,
}

struct RawProfile {
    user: u64,
    age: u32,
    gender: Gender,
    occupation: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_fields<'a>(line: &'a str, format: DataFormat, profile: bool) -> Vec<&'a str> {
    match (format, profile) {
        (DataFormat::Ml100k, false) => line.split('\t').collect(),
        (DataFormat::Ml100k, true) => line.split('|').collect(),
        (DataFormat::Ml1m, _) => line.split("::").collect(),
    }
}

fn field<T: std::str::FromStr>(
    fields: &[&str],
    idx: usize,
    what: &str,
    path: &Path,
    line: usize,
) -> Result<T> {
    let raw = fields.get(idx).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing field `{what}`"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse `{what}` from {raw:?}"),
    })
}

fn parse_ratings(
    text: &str,
    format: DataFormat,
    path: &Path,
    report: &mut LoadReport,
) -> Result<Vec<RawRating>> {
    // last write wins: a later line for the same (user, item) replaces the earlier one
    let mut slot: HashMap<(u64, u64), usize> = HashMap::new();
    let mut rows: Vec<RawRating> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.lines_read += 1;
        let fields = split_fields(line, format, false);
        if fields.len() < 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let user: u64 = field(&fields, 0, "user", path, lineno)?;
        let item: u64 = field(&fields, 1, "item", path, lineno)?;
        let rating: i64 = field(&fields, 2, "rating", path, lineno)?;
        let timestamp: i64 = field(&fields, 3, "timestamp", path, lineno)?;
        if !(1..=5).contains(&rating) {
            report.rejected_ratings += 1;
            continue;
        }
        let row = RawRating {
            user,
            item,
            rating: rating as u8,
            timestamp,
        };
        match slot.get(&(user, item)) {
            Some(&at) => {
                report.duplicates += 1;
                rows[at] = row;
            }
            None => {
                slot.insert((user, item), rows.len());
                rows.push(row);
            }
        }
    }
    if report.rejected_ratings > 0 {
        log::warn!(
            "{}: rejected {} ratings outside 1..5",
            path.display(),
            report.rejected_ratings
        );
    }
    if report.duplicates > 0 {
        log::warn!(
            "{}: {} duplicate (user, item) pairs, last one kept",
            path.display(),
            report.duplicates
        );
    }
    Ok(rows)
}

fn parse_gender(raw: &str, path: &Path, line: usize) -> Result<Gender> {
    match raw.trim() {
        "F" | "f" => Ok(Gender::Female),
        "M" | "m" => Ok(Gender::Male),
        other => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("unknown gender {other:?}"),
        }),
    }
}

fn parse_profiles(
    text: &str,
    format: DataFormat,
    path: &Path,
    occupations: &[String],
) -> Result<Vec<RawProfile>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line, format, true);
        if fields.len() < 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected at least 4 fields, found {}", fields.len()),
            });
        }
        let user: u64 = field(&fields, 0, "user", path, lineno)?;
        let (age, gender, occupation) = match format {
            DataFormat::Ml100k => {
                let age: u32 = field(&fields, 1, "age", path, lineno)?;
                let gender = parse_gender(fields[2], path, lineno)?;
                let name = fields[3].trim();
                let occupation = occupations.iter().position(|o| o == name).ok_or_else(|| {
                    Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        message: format!("unknown occupation {name:?}"),
                    }
                })?;
                (age, gender, occupation)
            }
            DataFormat::Ml1m => {
                let gender = parse_gender(fields[1], path, lineno)?;
                let age: u32 = field(&fields, 2, "age", path, lineno)?;
                let occupation: usize = field(&fields, 3, "occupation", path, lineno)?;
                (age, gender, occupation)
            }
        };
        if occupation >= NUM_OCCUPATIONS {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("occupation index {occupation} outside 0..{NUM_OCCUPATIONS}"),
            });
        }
        out.push(RawProfile {
            user,
            age,
            gender,
            occupation,
        });
    }
    Ok(out)
}

/// Reads the occupation vocabulary. For ML-100K a `u.occupation` file next to
/// the profile file is used when present; ML-1M uses integer codes.
fn occupation_vocabulary(format: DataFormat, profile_path: &Path) -> Result<Vec<String>> {
    match format {
        DataFormat::Ml100k => {
            let sidecar = profile_path.with_file_name("u.occupation");
            if sidecar.exists() {
                let names: Vec<String> = read(&sidecar)?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect();
                if names.len() != NUM_OCCUPATIONS {
                    return Err(Error::Data(format!(
                        "{} lists {} occupations, expected {NUM_OCCUPATIONS}",
                        sidecar.display(),
                        names.len()
                    )));
                }
                Ok(names)
            } else {
                Ok(ML100K_OCCUPATIONS.iter().map(|s| s.to_string()).collect())
            }
        }
        DataFormat::Ml1m => Ok((0..NUM_OCCUPATIONS).map(|i| i.to_string()).collect()),
    }
}

/// Loads ratings and profiles and reindexes users and items to contiguous
/// 0-based ids (ascending raw id). Only users with both a profile and at
/// least one valid rating are kept.
pub fn load_movielens(
    data_path: &Path,
    profile_path: &Path,
    format: DataFormat,
) -> Result<MovieLens> {
    let occupations = occupation_vocabulary(format, profile_path)?;
    let mut report = LoadReport::default();
    let ratings = parse_ratings(&read(data_path)?, format, data_path, &mut report)?;
    let raw_profiles = parse_profiles(&read(profile_path)?, format, profile_path, &occupations)?;
    Ok(assemble(ratings, raw_profiles, occupations, report))
}

/// Parses in-memory file contents; used for fixtures.
pub fn parse_movielens(
    ratings_text: &str,
    profiles_text: &str,
    format: DataFormat,
) -> Result<MovieLens> {
    let occupations: Vec<String> = match format {
        DataFormat::Ml100k => ML100K_OCCUPATIONS.iter().map(|s| s.to_string()).collect(),
        DataFormat::Ml1m => (0..NUM_OCCUPATIONS).map(|i| i.to_string()).collect(),
    };
    let mut report = LoadReport::default();
    let ratings = parse_ratings(ratings_text, format, Path::new("<ratings>"), &mut report)?;
    let raw_profiles = parse_profiles(profiles_text, format, Path::new("<profiles>"), &occupations)?;
    Ok(assemble(ratings, raw_profiles, occupations, report))
}

fn assemble(
    ratings: Vec<RawRating>,
    raw_profiles: Vec<RawProfile>,
    occupations: Vec<String>,
    mut report: LoadReport,
) -> MovieLens {
    let profiled: BTreeMap<u64, RawProfile> =
        raw_profiles.into_iter().map(|p| (p.user, p)).collect();
    let rated: BTreeSet<u64> = ratings.iter().map(|r| r.user).collect();

    report.users_without_profile = rated.iter().filter(|u| !profiled.contains_key(u)).count();
    report.profiles_without_ratings = profiled.keys().filter(|u| !rated.contains(u)).count();

    let user_raw_ids: Vec<u64> = rated
        .iter()
        .copied()
        .filter(|u| profiled.contains_key(u))
        .collect();
    let user_index: HashMap<u64, u32> = user_raw_ids
        .iter()
        .enumerate()
        .map(|(i, &u)| (u, i as u32))
        .collect();

    let item_raw_ids: Vec<u64> = ratings
        .iter()
        .filter(|r| user_index.contains_key(&r.user))
        .map(|r| r.item)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_index: HashMap<u64, u32> = item_raw_ids
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u32))
        .collect();

    let interactions = ratings
        .iter()
        .filter_map(|r| {
            Some(Interaction {
                user_id: *user_index.get(&r.user)?,
                item_id: *item_index.get(&r.item)?,
                rating: r.rating,
                timestamp: r.timestamp,
            })
        })
        .collect();

    let profiles = user_raw_ids
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            let p = &profiled[raw];
            UserProfile {
                user_id: i as u32,
                age: p.age,
                gender: p.gender,
                occupation: p.occupation,
            }
        })
        .collect();

    log::info!(
        "loaded {} users, {} items, {} interactions",
        user_raw_ids.len(),
        item_raw_ids.len(),
        report.lines_read - report.duplicates - report.rejected_ratings
    );

    MovieLens {
        interactions,
        profiles,
        user_raw_ids,
        item_raw_ids,
        occupations,
        report,
    }
}
