//! Prompt templates and their rendering into slot layouts.
//!
//! A rendered layout is
//! `[DESC…] P_1…P_i TEXT_A P_{i+1}…P_I MASK [TEXT_B]`, where the description
//! prefix only exists for type templates and `i` is the split point.

use serde::{Deserialize, Serialize};

use crate::data::{Example, GroupId, TaskId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Task,
    Universal,
    Type,
}

/// Who owns a template's pseudo tokens. Distinct owners never share pseudo
/// embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptOwner {
    Task(TaskId),
    Universal,
    Type(GroupId),
}

impl PromptOwner {
    pub fn key(&self) -> String {
        match self {
            PromptOwner::Task(t) => format!("task.{t}"),
            PromptOwner::Universal => "universal".into(),
            PromptOwner::Type(g) => format!("type.{g}"),
        }
    }
}

/// Per-task layout knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSettings {
    pub pseudo_count: usize,
    pub split_point: usize,
    /// Insert `.` after each sentence, as in the written templates.
    pub punctuation: bool,
}

impl Default for TemplateSettings {
    fn default() -> Self {
        Self {
            pseudo_count: 2,
            split_point: 0,
            punctuation: false,
        }
    }
}

impl TemplateSettings {
    pub fn validate(&self) -> Result<()> {
        if self.split_point > self.pseudo_count {
            return Err(Error::InvalidTemplate(format!(
                "split point {} exceeds pseudo count {}",
                self.split_point, self.pseudo_count
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub pseudo_count: usize,
    pub split_point: usize,
    pub description: Vec<usize>,
    pub owner: PromptOwner,
    pub punctuation: bool,
}

pub fn build_template(
    kind: TemplateKind,
    settings: TemplateSettings,
    owner: PromptOwner,
    description: Option<Vec<usize>>,
) -> Result<PromptTemplate> {
    settings.validate()?;
    let owner_ok = matches!(
        (kind, &owner),
        (TemplateKind::Task, PromptOwner::Task(_))
            | (TemplateKind::Universal, PromptOwner::Universal)
            | (TemplateKind::Type, PromptOwner::Type(_))
            | (TemplateKind::Type, PromptOwner::Task(_))
    );
    if !owner_ok {
        return Err(Error::InvalidTemplate(format!("{kind:?} template cannot be owned by {owner:?}")));
    }
    let description = match (kind, description) {
        (TemplateKind::Type, Some(d)) if !d.is_empty() => d,
        (TemplateKind::Type, _) => {
            return Err(Error::InvalidTemplate("type template needs description tokens".into()))
        }
        (_, Some(d)) if !d.is_empty() => {
            return Err(Error::InvalidTemplate(format!(
                "{kind:?} template takes no description ({} tokens given)",
                d.len()
            )))
        }
        _ => Vec::new(),
    };
    Ok(PromptTemplate {
        kind,
        pseudo_count: settings.pseudo_count,
        split_point: settings.split_point,
        description,
        owner,
        punctuation: settings.punctuation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Pseudo { index: usize, owner: PromptOwner },
    TextA(usize),
    TextB(usize),
    Desc { index: usize, token: usize },
    Punct(usize),
    Mask,
}

impl Slot {
    /// Vocabulary id carried by a text-bearing slot.
    pub fn token(&self) -> Option<usize> {
        match self {
            Slot::TextA(t) | Slot::TextB(t) | Slot::Punct(t) => Some(*t),
            Slot::Desc { token, .. } => Some(*token),
            Slot::Pseudo { .. } | Slot::Mask => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub slots: Vec<Slot>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mask_position(&self) -> usize {
        self.slots
            .iter()
            .position(|s| matches!(s, Slot::Mask))
            .expect("rendered layouts hold one mask")
    }

    pub fn pseudo_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Pseudo { .. })).count()
    }

    /// Pseudo owner, if the layout has pseudo slots.
    pub fn pseudo_owner(&self) -> Option<&PromptOwner> {
        self.slots.iter().find_map(|s| match s {
            Slot::Pseudo { owner, .. } => Some(owner),
            _ => None,
        })
    }
}

/// Lay out `example` under `template`. Unknown words become `[UNK]`.
pub fn render(template: &PromptTemplate, example: &Example, vocab: &Vocabulary) -> Result<TokenLayout> {
    if example.text_a.is_empty() {
        return Err(Error::InvalidExample {
            uid: example.uid.clone(),
            reason: "empty text_a".into(),
        });
    }
    let mut slots = Vec::with_capacity(
        template.description.len()
            + template.pseudo_count
            + example.text_a.len()
            + example.text_b.as_ref().map_or(0, Vec::len)
            + 3,
    );
    slots.extend(
        template
            .description
            .iter()
            .enumerate()
            .map(|(index, &token)| Slot::Desc { index, token }),
    );
    let pseudo = |index| Slot::Pseudo {
        index,
        owner: template.owner.clone(),
    };
    slots.extend((0..template.split_point).map(pseudo));
    slots.extend(vocab.encode(&example.text_a).into_iter().map(Slot::TextA));
    if template.punctuation {
        slots.push(Slot::Punct(vocab.period_id()));
    }
    slots.extend((template.split_point..template.pseudo_count).map(pseudo));
    slots.push(Slot::Mask);
    if let Some(b) = &example.text_b {
        if template.punctuation {
            slots.push(Slot::Punct(vocab.period_id()));
        }
        slots.extend(vocab.encode(b).into_iter().map(Slot::TextB));
        if template.punctuation {
            slots.push(Slot::Punct(vocab.period_id()));
        }
    }
    Ok(TokenLayout { slots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq)]
    enum Tag {
        A,
        B,
        P,
        D,
        M,
        Dot,
    }

    fn tags(layout: &TokenLayout) -> Vec<Tag> {
        layout
            .slots
            .iter()
            .map(|s| match s {
                Slot::TextA(_) => Tag::A,
                Slot::TextB(_) => Tag::B,
                Slot::Pseudo { .. } => Tag::P,
                Slot::Desc { .. } => Tag::D,
                Slot::Mask => Tag::M,
                Slot::Punct(_) => Tag::Dot,
            })
            .collect()
    }

    fn example(a: &[&str], b: Option<&[&str]>) -> Example {
        Example {
            uid: "x".into(),
            task_id: "t".into(),
            text_a: a.iter().map(|s| (*s).to_owned()).collect(),
            text_b: b.map(|b| b.iter().map(|s| (*s).to_owned()).collect()),
            label: "l".into(),
        }
    }

    fn settings(pseudo_count: usize, split_point: usize) -> TemplateSettings {
        TemplateSettings {
            pseudo_count,
            split_point,
            punctuation: false,
        }
    }

    fn task_template(i: usize, split: usize) -> PromptTemplate {
        build_template(TemplateKind::Task, settings(i, split), PromptOwner::Task("t".into()), None).unwrap()
    }

    #[test]
    fn single_pseudo_after_sentence() {
        use Tag::*;
        let layout = render(&task_template(1, 0), &example(&["good"], None), &Vocabulary::new()).unwrap();
        assert_eq!(tags(&layout), vec![A, P, M]);
    }

    #[test]
    fn prompt_free_cloze() {
        use Tag::*;
        let layout = render(&task_template(0, 0), &example(&["a", "b"], None), &Vocabulary::new()).unwrap();
        assert_eq!(tags(&layout), vec![A, A, M]);
    }

    #[test]
    fn default_layout_and_pair_layout() {
        use Tag::*;
        let t = task_template(2, 0);
        let v = Vocabulary::new();
        assert_eq!(tags(&render(&t, &example(&["x"], None), &v).unwrap()), vec![A, P, P, M]);
        let pair = render(&t, &example(&["x"], Some(&["y", "z"])), &v).unwrap();
        assert_eq!(tags(&pair), vec![A, P, P, M, B, B]);
    }

    #[test]
    fn split_point_places_pseudo_on_both_sides() {
        use Tag::*;
        let layout = render(&task_template(3, 1), &example(&["x", "y"], None), &Vocabulary::new()).unwrap();
        assert_eq!(tags(&layout), vec![P, A, A, P, P, M]);
    }

    #[test]
    fn type_template_puts_description_first() {
        use Tag::*;
        let t = build_template(
            TemplateKind::Type,
            settings(2, 0),
            PromptOwner::Type("g".into()),
            Some(vec![5, 6, 7, 8]),
        )
        .unwrap();
        let layout = render(&t, &example(&["x"], None), &Vocabulary::new()).unwrap();
        assert_eq!(tags(&layout), vec![D, D, D, D, A, P, P, M]);
        assert_eq!(layout.len(), 1 + 2 + 4 + 1);
    }

    #[test]
    fn punctuation_follows_written_template() {
        use Tag::*;
        let s = TemplateSettings {
            punctuation: true,
            ..settings(1, 0)
        };
        let t = build_template(TemplateKind::Task, s, PromptOwner::Task("t".into()), None).unwrap();
        let layout = render(&t, &example(&["x"], Some(&["y"])), &Vocabulary::new()).unwrap();
        assert_eq!(tags(&layout), vec![A, Dot, P, M, Dot, B, Dot]);
    }

    #[test]
    fn invalid_templates_are_rejected() {
        let no_desc = build_template(TemplateKind::Type, settings(1, 0), PromptOwner::Type("g".into()), None);
        assert!(no_desc.is_err());
        assert!(build_template(TemplateKind::Task, settings(1, 2), PromptOwner::Task("t".into()), None).is_err());
        assert!(build_template(TemplateKind::Universal, settings(1, 0), PromptOwner::Task("t".into()), None).is_err());
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(render(&task_template(1, 0), &example(&[], None), &Vocabulary::new()).is_err());
    }

    #[test]
    fn layouts_of_one_template_differ_only_in_text() {
        let t = task_template(2, 1);
        let v = Vocabulary::new();
        let a = render(&t, &example(&["p", "q"], None), &v).unwrap();
        let b = render(&t, &example(&["r", "s"], None), &v).unwrap();
        assert_eq!(tags(&a), tags(&b));
        for (x, y) in a.slots.iter().zip(&b.slots) {
            if !matches!(x, Slot::TextA(_)) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn owners_keep_pseudo_identities_apart() {
        let v = Vocabulary::new();
        let ex = example(&["x"], None);
        let task = render(&task_template(2, 0), &ex, &v).unwrap();
        let uni = render(
            &build_template(TemplateKind::Universal, settings(2, 0), PromptOwner::Universal, None).unwrap(),
            &ex,
            &v,
        )
        .unwrap();
        assert_ne!(task.pseudo_owner(), uni.pseudo_owner());
        assert_ne!(PromptOwner::Task("g".into()).key(), PromptOwner::Type("g".into()).key());
    }
}
