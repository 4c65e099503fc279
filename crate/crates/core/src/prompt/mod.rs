//! Hard-prompt rendering with item span tracking.
//!
//! Templates are data: named clauses with `{field}` placeholders, resolved
//! against user profile fields and item attributes. Rendering records the
//! character span of every item mention (history order, then target) so the
//! tokenizer can place soft prompt tokens and the attention extractor can
//! aggregate per item. Pure-ID fields (user id, item id, zip code) are
//! rejected at template validation time and never appear in a prompt.

pub mod spa;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{Catalog, InteractionSample, Item};
use crate::error::{Error, Result};
use crate::subr::retrieve_top_k_indices;

/// Placeholders that would leak pure-ID fields into the text.
const FORBIDDEN_PLACEHOLDERS: [&str; 4] = ["user_id", "item_id", "zipcode", "zip"];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    /// e.g. `The user is {gender}, age {age}, occupation {occupation}.`
    pub profile: String,
    pub history_header: String,
    /// Per-item line; must contain `{item}` and may use `{index}`/`{judgment}`.
    pub history_item: String,
    /// Target clause; must contain `{item}`.
    pub target: String,
    /// Question clause ending right before the answer token.
    pub question: String,
    /// Descriptive text used for semantic item encoding.
    pub item_description: String,
    /// The item mention substituted for `{item}`.
    pub item_mention: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        for clause in [
            &self.profile,
            &self.history_header,
            &self.history_item,
            &self.target,
            &self.question,
            &self.item_description,
            &self.item_mention,
        ] {
            for ph in placeholders(clause) {
                if FORBIDDEN_PLACEHOLDERS.contains(&ph.as_str()) {
                    return Err(Error::Template(format!(
                        "template `{}` references pure-ID field `{ph}`",
                        self.name
                    )));
                }
            }
        }
        if !placeholders(&self.history_item).contains(&"item".to_string()) {
            return Err(Error::Template(format!(
                "template `{}` history_item must contain {{item}}",
                self.name
            )));
        }
        if !placeholders(&self.target).contains(&"item".to_string()) {
            return Err(Error::Template(format!(
                "template `{}` target must contain {{item}}",
                self.name
            )));
        }
        Ok(())
    }
}

fn placeholders(clause: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = clause;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start + 1..].find('}') else { break };
        out.push(rest[start + 1..start + 1 + len].to_string());
        rest = &rest[start + 1 + len + 1..];
    }
    out
}

/// Substitute `{field}` placeholders from a lookup, erroring on unknown ones.
fn substitute(clause: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(clause.len());
    let mut rest = clause;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 1..];
        let Some(len) = tail.find('}') else {
            out.push('{');
            rest = tail;
            continue;
        };
        let name = &tail[..len];
        match lookup(name) {
            Some(value) => out.push_str(&value),
            None => {
                return Err(Error::MissingPlaceholder {
                    placeholder: name.to_string(),
                })
            }
        }
        rest = &tail[len + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn item_lookup(item: &Item, extra: &BTreeMap<&str, String>) -> impl Fn(&str) -> Option<String> {
    let title = item.title.clone();
    let attributes: Vec<(String, String)> = item
        .attributes
        .iter()
        .map(|(field, values)| {
            let joined = if values.is_empty() {
                "unknown".to_string()
            } else {
                values.join(", ")
            };
            (field.clone(), joined)
        })
        .collect();
    let extra: BTreeMap<String, String> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    move |name: &str| {
        if name == "title" {
            return Some(title.clone());
        }
        if let Some(v) = extra.get(name) {
            return Some(v.clone());
        }
        attributes.iter().find(|(f, _)| f == name).map(|(_, v)| v.clone())
    }
}

/// Deterministic substitution of one item into the description clause.
pub fn render_item_description(item: &Item, template: &PromptTemplate) -> Result<String> {
    substitute(&template.item_description, &item_lookup(item, &BTreeMap::new()))
}

/// The item mention text substituted for `{item}` in history/target clauses.
pub fn render_item_mention(item: &Item, template: &PromptTemplate) -> Result<String> {
    substitute(&template.item_mention, &item_lookup(item, &BTreeMap::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    /// Most recent K behaviors, chronological.
    Recent,
    /// Top-K semantically relevant behaviors, re-emitted chronologically.
    Retrieved,
}

impl std::str::FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recent" => Ok(HistoryMode::Recent),
            "retrieved" => Ok(HistoryMode::Retrieved),
            other => Err(Error::Config(format!("unknown history mode `{other}`"))),
        }
    }
}

/// Byte range of one item mention in the rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    /// One span per rendered history item (chronological), then the target.
    pub item_spans: Vec<CharSpan>,
    /// The (item_id, label) pairs actually rendered, history order.
    pub rendered_history: Vec<(u32, u8)>,
    pub target_item: u32,
    /// Ground-truth answer word for the sample.
    pub answer: &'static str,
}

/// Select which history positions to render.
pub fn select_history(
    sample: &InteractionSample,
    mode: HistoryMode,
    k: usize,
    reduced: Option<&BTreeMap<u32, Vec<f64>>>,
) -> Result<Vec<usize>> {
    if sample.history.is_empty() {
        return Err(Error::EmptyHistory {
            user_id: sample.user_id,
        });
    }
    let len = sample.history.len();
    match mode {
        HistoryMode::Recent => Ok((len.saturating_sub(k)..len).collect()),
        HistoryMode::Retrieved => {
            let reduced = reduced.ok_or_else(|| {
                Error::Config("retrieved mode requires semantic vectors".into())
            })?;
            let ids: Vec<u32> = sample.history.iter().map(|h| h.item_id).collect();
            retrieve_top_k_indices(&ids, sample.target_item, k, reduced)
        }
    }
}

/// Render the full hard prompt for one sample.
///
/// `K` larger than the history renders the whole history; both modes then
/// coincide. Every item mention's span is recorded, history order then target.
pub fn render_hard_prompt(
    sample: &InteractionSample,
    catalog: &Catalog,
    template: &PromptTemplate,
    mode: HistoryMode,
    k: usize,
    reduced: Option<&BTreeMap<u32, Vec<f64>>>,
) -> Result<RenderedPrompt> {
    assert!(k >= 1, "render_hard_prompt requires K >= 1");
    let user = catalog.user(sample.user_id)?;
    let positions = select_history(sample, mode, k, reduced)?;

    let mut text = String::new();
    let mut item_spans = Vec::with_capacity(positions.len() + 1);
    let mut rendered_history = Vec::with_capacity(positions.len());

    let profile = substitute(&template.profile, &|name| user.field(name).map(|v| v.to_string()))?;
    text.push_str(&profile);
    text.push('\n');
    text.push_str(&template.history_header);
    text.push('\n');

    for (index, &pos) in positions.iter().enumerate() {
        let event = &sample.history[pos];
        let item = catalog.item(event.item_id)?;
        let mention = render_item_mention(item, template)?;
        let judgment = if event.label == 1 { "liked" } else { "disliked" };
        let extra = BTreeMap::from([
            ("index", (index + 1).to_string()),
            ("judgment", judgment.to_string()),
            ("item", mention.clone()),
        ]);
        let line = substitute(&template.history_item, &item_lookup(item, &extra))?;
        let mention_at = line.find(&mention).expect("history_item must embed the mention");
        item_spans.push(CharSpan {
            start: text.len() + mention_at,
            end: text.len() + mention_at + mention.len(),
        });
        text.push_str(&line);
        text.push('\n');
        rendered_history.push((event.item_id, event.label));
    }

    let target = catalog.item(sample.target_item)?;
    let mention = render_item_mention(target, template)?;
    let extra = BTreeMap::from([("item", mention.clone())]);
    let target_line = substitute(&template.target, &item_lookup(target, &extra))?;
    let mention_at = target_line.find(&mention).expect("target must embed the mention");
    item_spans.push(CharSpan {
        start: text.len() + mention_at,
        end: text.len() + mention_at + mention.len(),
    });
    text.push_str(&target_line);
    text.push('\n');
    text.push_str(&template.question);

    Ok(RenderedPrompt {
        text,
        item_spans,
        rendered_history,
        target_item: sample.target_item,
        answer: if sample.label == 1 { "Yes" } else { "No" },
    })
}

/// Built-in templates plus any loaded from a template file.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        let movie = |name: &str| PromptTemplate {
            name: name.to_string(),
            profile: "The user is {gender}, age {age}, occupation {occupation}.".into(),
            history_header: "The user watched the following movies in order, and rated them as noted:".into(),
            history_item: "{index}. {item} - {judgment}.".into(),
            target: "Candidate movie: {item}.".into(),
            question: "Will the user like the candidate movie? Answer Yes or No. Answer:".into(),
            item_description: "Here is a movie. Its title is {title}. Its genres are {genres}.".into(),
            item_mention: "{title} ({genres})".into(),
        };
        templates.insert("ml-1m".to_string(), movie("ml-1m"));
        templates.insert("ml-25m".to_string(), movie("ml-25m"));
        templates.insert("synthetic".to_string(), movie("synthetic"));
        // registry stub: book corpora carry no genre field
        templates.insert(
            "bookcrossing".to_string(),
            PromptTemplate {
                name: "bookcrossing".to_string(),
                profile: "The user is {gender}, age {age}, occupation {occupation}.".into(),
                history_header: "The user read the following books in order, and rated them as noted:".into(),
                history_item: "{index}. {item} - {judgment}.".into(),
                target: "Candidate book: {item}.".into(),
                question: "Will the user like the candidate book? Answer Yes or No. Answer:".into(),
                item_description: "Here is a book. Its title is {title}.".into(),
                item_mention: "{title}".into(),
            },
        );
        TemplateRegistry { templates }
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(name)
            .ok_or_else(|| Error::Template(format!("no template named `{name}`")))
    }

    pub fn insert(&mut self, template: PromptTemplate) -> Result<()> {
        template.validate()?;
        self.templates.insert(template.name.clone(), template);
        Ok(())
    }

    /// Merge templates from a file of `[template NAME]` sections with
    /// `clause = text` lines.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut current: Option<PromptTemplate> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Load {
                file: path.display().to_string(),
                line: idx + 1,
                message,
            };
            if let Some(rest) = line.strip_prefix("[template") {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| err("bad section header".into()))?;
                if let Some(done) = current.take() {
                    self.insert(done)?;
                }
                current = Some(PromptTemplate {
                    name: name.to_string(),
                    profile: String::new(),
                    history_header: String::new(),
                    history_item: String::new(),
                    target: String::new(),
                    question: String::new(),
                    item_description: String::new(),
                    item_mention: String::new(),
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `clause = text`".into()))?;
            let template = current.as_mut().ok_or_else(|| err("clause before [template ...]".into()))?;
            match key {
                "profile" => template.profile = value.to_string(),
                "history_header" => template.history_header = value.to_string(),
                "history_item" => template.history_item = value.to_string(),
                "target" => template.target = value.to_string(),
                "question" => template.question = value.to_string(),
                "item_description" => template.item_description = value.to_string(),
                "item_mention" => template.item_mention = value.to_string(),
                other => return Err(err(format!("unknown clause `{other}`"))),
            }
        }
        if let Some(done) = current.take() {
            self.insert(done)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{HistoryEvent, User};
    use std::sync::Arc;

    fn item(id: u32, title: &str, genres: &[&str]) -> Item {
        Item {
            item_id: id,
            title: title.into(),
            attributes: vec![("genres".into(), genres.iter().map(|g| g.to_string()).collect())],
        }
    }

    fn catalog() -> Catalog {
        let mut c = Catalog::default();
        for (id, title, genres) in [
            (1, "Toy Story (1995)", vec!["Animation", "Comedy"]),
            (2, "Heat (1995)", vec!["Action", "Crime"]),
            (3, "Casino (1995)", vec!["Drama"]),
            (4, "Sabrina (1995)", vec!["Comedy", "Romance"]),
            (5, "GoldenEye (1995)", vec!["Action"]),
            (6, "Nixon (1995)", vec!["Drama"]),
        ] {
            c.items.insert(id, item(id, title, &genres));
        }
        c.users.insert(
            7,
            User {
                user_id: 7,
                profile: vec![
                    ("gender".into(), "female".into()),
                    ("age".into(), "25-34".into()),
                    ("occupation".into(), "programmer".into()),
                ],
            },
        );
        c
    }

    fn sample() -> InteractionSample {
        InteractionSample {
            user_id: 7,
            history: Arc::new(vec![
                HistoryEvent { item_id: 1, label: 1, timestamp: 10 },
                HistoryEvent { item_id: 2, label: 0, timestamp: 20 },
                HistoryEvent { item_id: 3, label: 1, timestamp: 30 },
                HistoryEvent { item_id: 4, label: 1, timestamp: 40 },
                HistoryEvent { item_id: 5, label: 0, timestamp: 50 },
            ]),
            target_item: 6,
            label: 0,
            timestamp: 60,
            split: crate::data::Split::Test,
        }
    }

    #[test]
    fn item_description_substitutes_directly() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let text = render_item_description(&item(1, "Toy Story (1995)", &["Animation", "Comedy"]), template).unwrap();
        assert_eq!(
            text,
            "Here is a movie. Its title is Toy Story (1995). Its genres are Animation, Comedy."
        );
        // determinism
        let again = render_item_description(&item(1, "Toy Story (1995)", &["Animation", "Comedy"]), template).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn empty_genre_list_renders_unknown() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let text = render_item_description(&item(1, "Mystery Film", &[]), template).unwrap();
        assert!(text.contains("Its genres are unknown."), "{text}");
    }

    #[test]
    fn missing_placeholder_field_is_an_error() {
        let registry = TemplateRegistry::builtin();
        let mut template = registry.get("ml-1m").unwrap().clone();
        template.item_description = "A {color} movie called {title}.".into();
        let err = render_item_description(&item(1, "X", &["Drama"]), &template).unwrap_err();
        assert!(err.to_string().contains("color"));
    }

    #[test]
    fn spans_reproduce_item_mentions_exactly() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let rendered = render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Recent, 3, None).unwrap();
        assert_eq!(rendered.item_spans.len(), 4); // 3 history + target
        let catalog = catalog();
        let expected_ids = [3u32, 4, 5, 6];
        for (span, id) in rendered.item_spans.iter().zip(expected_ids) {
            let mention = render_item_mention(catalog.item(id).unwrap(), template).unwrap();
            assert_eq!(&rendered.text[span.start..span.end], mention);
        }
    }

    #[test]
    fn recent_mode_takes_last_k_chronologically() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let rendered = render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Recent, 2, None).unwrap();
        assert_eq!(
            rendered.rendered_history.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
            vec![4, 5]
        );
        assert!(rendered.text.contains("liked"));
        assert!(rendered.text.contains("disliked"));
    }

    #[test]
    fn saturated_k_makes_modes_coincide() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        // identical vectors not needed: K >= |history| short-circuits retrieval
        let reduced: BTreeMap<u32, Vec<f64>> = (1..=6).map(|id| (id, vec![id as f64, 1.0])).collect();
        let recent = render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Recent, 9, None).unwrap();
        let retrieved =
            render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Retrieved, 9, Some(&reduced)).unwrap();
        assert_eq!(recent.text, retrieved.text);
    }

    #[test]
    fn retrieved_k1_picks_duplicate_of_target() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let mut reduced: BTreeMap<u32, Vec<f64>> = (1..=6).map(|id| (id, vec![id as f64, 1.0, -2.0])).collect();
        reduced.insert(2, reduced[&6].clone()); // history item 2 duplicates the target vector
        let rendered =
            render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Retrieved, 1, Some(&reduced)).unwrap();
        assert_eq!(rendered.rendered_history.len(), 1);
        assert_eq!(rendered.rendered_history[0].0, 2);
    }

    #[test]
    fn rendered_length_equals_sum_of_clause_lengths() {
        // character-count oracle: the prompt is the exact concatenation of its
        // independently rendered clauses plus one newline per clause boundary
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let s = sample();
        let c = catalog();
        let rendered = render_hard_prompt(&s, &c, template, HistoryMode::Recent, 2, None).unwrap();

        let profile = "The user is female, age 25-34, occupation programmer.";
        let header = &template.history_header;
        let line1 = format!("1. {} - {}.", render_item_mention(c.item(4).unwrap(), template).unwrap(), "liked");
        let line2 = format!("2. {} - {}.", render_item_mention(c.item(5).unwrap(), template).unwrap(), "disliked");
        let target = format!("Candidate movie: {}.", render_item_mention(c.item(6).unwrap(), template).unwrap());
        let total = profile.len() + 1 + header.len() + 1 + line1.len() + 1 + line2.len() + 1 + target.len() + 1
            + template.question.len();
        assert_eq!(rendered.text.len(), total);
    }

    #[test]
    fn prompts_never_contain_pure_id_fields() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let rendered = render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Recent, 5, None).unwrap();
        assert!(!rendered.text.contains("zipcode"));
        assert!(!rendered.text.contains("48067"));

        let mut bad = template.clone();
        bad.profile = "User {user_id} from {zipcode}.".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_history_is_an_error() {
        let registry = TemplateRegistry::builtin();
        let template = registry.get("ml-1m").unwrap();
        let mut s = sample();
        s.history = Arc::new(vec![]);
        assert!(render_hard_prompt(&s, &catalog(), template, HistoryMode::Recent, 2, None).is_err());
    }

    #[test]
    fn template_file_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.txt");
        std::fs::write(
            &path,
            "# custom wording\n[template ml-1m]\nprofile = A {gender} viewer.\nhistory_header = Watched:\nhistory_item = {index}: {item} [{judgment}]\ntarget = Next up: {item}\nquestion = Like it? Answer Yes or No. Answer:\nitem_description = Movie titled {title}.\nitem_mention = {title}\n",
        )
        .unwrap();
        let mut registry = TemplateRegistry::builtin();
        registry.load_file(&path).unwrap();
        let template = registry.get("ml-1m").unwrap();
        assert_eq!(template.profile, "A {gender} viewer.");
        let rendered = render_hard_prompt(&sample(), &catalog(), template, HistoryMode::Recent, 1, None).unwrap();
        assert!(rendered.text.starts_with("A female viewer.\nWatched:\n1: GoldenEye (1995) [disliked]"));
    }
}
