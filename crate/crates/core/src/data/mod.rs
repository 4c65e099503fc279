//! Catalog and sample types for CTR prediction over interaction logs.
//!
//! A sample is a user, their full lifelong history strictly before the target
//! timestamp, one target item, and a binary label. Histories keep per-event
//! labels because prompts render a like/dislike judgment for every historical
//! item.

pub mod movielens;
pub mod samples;
pub mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: u32,
    pub title: String,
    /// Ordered attribute fields, each with one or more text values
    /// (e.g. `("genres", ["Animation", "Comedy"])`).
    pub attributes: Vec<(String, Vec<String>)>,
}

impl Item {
    pub fn attribute(&self, field: &str) -> Option<&[String]> {
        self.attributes
            .iter()
            .find(|(name, _)| name == field)
            .map(|(_, values)| values.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub user_id: u32,
    /// Ordered profile fields (e.g. gender, age, occupation).
    pub profile: Vec<(String, String)>,
}

impl User {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.profile
            .iter()
            .find(|(field, _)| field == name)
            .map(|(_, value)| value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEvent {
    pub user_id: u32,
    pub item_id: u32,
    pub rating: f64,
    pub timestamp: i64,
    /// Original file position; stable secondary sort key for timestamp ties.
    pub seq: usize,
}

/// Labeling rule mapping a raw rating to a binary click label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Ratings of 4 and 5 are positive.
    MovieLens1M,
    /// Ratings above 3.0 are positive.
    MovieLens25M,
    /// Ratings above 5 are positive.
    BookCrossing,
}

impl LabelRule {
    pub fn label(&self, rating: f64) -> u8 {
        let positive = match self {
            LabelRule::MovieLens1M => rating >= 4.0,
            LabelRule::MovieLens25M => rating > 3.0,
            LabelRule::BookCrossing => rating > 5.0,
        };
        u8::from(positive)
    }
}

impl std::str::FromStr for LabelRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ml-1m" => Ok(LabelRule::MovieLens1M),
            "ml-25m" => Ok(LabelRule::MovieLens25M),
            "bookcrossing" => Ok(LabelRule::BookCrossing),
            other => Err(crate::Error::Config(format!("unknown label rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labeled event inside a lifelong history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEvent {
    pub item_id: u32,
    pub label: u8,
    pub timestamp: i64,
}

/// One CTR instance. Histories are shared (`Arc`) between samples of the same
/// user whose targets fall at the same timestamp cut.
#[derive(Debug, Clone)]
pub struct InteractionSample {
    pub user_id: u32,
    pub history: Arc<Vec<HistoryEvent>>,
    pub target_item: u32,
    pub label: u8,
    pub timestamp: i64,
    pub split: Split,
}

/// Immutable item/user catalogs plus the raw event stream.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub items: BTreeMap<u32, Item>,
    pub users: BTreeMap<u32, User>,
}

impl Catalog {
    pub fn item(&self, id: u32) -> crate::Result<&Item> {
        self.items.get(&id).ok_or(crate::Error::UnknownId { kind: "item", id })
    }

    pub fn user(&self, id: u32) -> crate::Result<&User> {
        self.users.get(&id).ok_or(crate::Error::UnknownId { kind: "user", id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rules_match_dataset_conventions() {
        assert_eq!(LabelRule::MovieLens1M.label(5.0), 1);
        assert_eq!(LabelRule::MovieLens1M.label(4.0), 1);
        assert_eq!(LabelRule::MovieLens1M.label(3.0), 0);
        assert_eq!(LabelRule::MovieLens25M.label(3.0), 0);
        assert_eq!(LabelRule::MovieLens25M.label(3.5), 1);
        assert_eq!(LabelRule::BookCrossing.label(5.0), 0);
        assert_eq!(LabelRule::BookCrossing.label(6.0), 1);
    }

    #[test]
    fn attribute_lookup_by_field() {
        let item = Item {
            item_id: 1,
            title: "T".into(),
            attributes: vec![("genres".into(), vec!["A".into(), "B".into()])],
        };
        assert_eq!(item.attribute("genres").unwrap().len(), 2);
        assert!(item.attribute("year").is_none());
    }
}
