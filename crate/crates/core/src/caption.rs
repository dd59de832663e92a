//! Metadata-driven caption synthesis.
//!
//! Columns are chosen by greedy forward selection on distinctness (the
//! number of classes that end up with different column-value tuples), then
//! each class is rendered as `prefix + join(values, separator) + suffix`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::metadata::{MetadataError, MetadataTable};
use crate::text::{collapse_whitespace, words};

pub const DEFAULT_TOKEN_BUDGET: usize = 64;
pub const DEFAULT_MAX_COLUMNS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error("max_columns must be at least 1")]
    ZeroMaxColumns,
    #[error("selection was made for table {expected}, got table {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("class {0} is not in the table")]
    UnknownClass(u64),
    #[error("class {0} renders to an empty caption")]
    EmptyCaption(u64),
    #[error("caption document: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CaptionError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionTemplate {
    pub prefix: String,
    pub separator: String,
    pub suffix: String,
}

impl Default for CaptionTemplate {
    fn default() -> Self {
        Self {
            prefix: "A photo of the ".into(),
            separator: " ".into(),
            suffix: String::new(),
        }
    }
}

impl CaptionTemplate {
    /// The indefinite-article variant, "A photo of a ...".
    pub fn indefinite() -> Self {
        Self {
            prefix: "A photo of a ".into(),
            ..Self::default()
        }
    }

    /// Joins `values` between prefix and suffix, collapsing whitespace.
    pub fn render<'a>(&self, values: impl IntoIterator<Item = &'a str>) -> String {
        let mut out = self.prefix.clone();
        for (i, value) in values.into_iter().enumerate() {
            if i > 0 {
                out.push_str(&self.separator);
            }
            out.push_str(value);
        }
        out.push_str(&self.suffix);
        collapse_whitespace(&out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSelection {
    /// Selected columns in table order, which is also concatenation order.
    pub columns: Vec<String>,
    pub distinctness: usize,
    pub table_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionOptions {
    pub template: CaptionTemplate,
    pub max_columns: usize,
    /// Upper bound on words per caption; `None` disables the cap.
    pub token_budget: Option<usize>,
    /// After greedy selection stops, keep adding columns (in table order) that
    /// vary across classes until `max_columns` is reached.
    pub fill_varying_columns: bool,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self {
            template: CaptionTemplate::default(),
            max_columns: DEFAULT_MAX_COLUMNS,
            token_budget: Some(DEFAULT_TOKEN_BUDGET),
            fill_varying_columns: true,
        }
    }
}

fn resolve_indices(table: &MetadataTable, subset: &[impl AsRef<str>]) -> Result<Vec<usize>> {
    subset
        .iter()
        .map(|c| table.column_index(c.as_ref()).map_err(Into::into))
        .collect()
}

fn count_distinct(table: &MetadataTable, indices: &[usize]) -> usize {
    if indices.is_empty() {
        return usize::from(!table.is_empty());
    }
    table
        .records()
        .iter()
        .map(|r| indices.iter().map(|&i| r.value_at(i)).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Number of distinct per-class value tuples over `subset`.
///
/// Tuples are compared field by field rather than as joined strings so that
/// a value containing the separator cannot merge two classes.
pub fn distinctness_score(table: &MetadataTable, subset: &[impl AsRef<str>]) -> Result<usize> {
    let indices = resolve_indices(table, subset)?;
    Ok(count_distinct(table, &indices))
}

fn max_caption_words(table: &MetadataTable, sorted: &[usize], template: &CaptionTemplate) -> usize {
    table
        .records()
        .iter()
        .map(|r| words(&template.render(sorted.iter().map(|&i| r.value_at(i).unwrap_or("")))).len())
        .max()
        .unwrap_or(0)
}

fn within_budget(
    table: &MetadataTable,
    chosen: &[usize],
    candidate: usize,
    opts: &CaptionOptions,
) -> bool {
    let Some(budget) = opts.token_budget else {
        return true;
    };
    let mut trial = chosen.to_vec();
    trial.push(candidate);
    trial.sort_unstable();
    max_caption_words(table, &trial, &opts.template) <= budget
}

fn selection_from(table: &MetadataTable, mut chosen: Vec<usize>) -> ColumnSelection {
    chosen.sort_unstable();
    ColumnSelection {
        distinctness: count_distinct(table, &chosen),
        columns: chosen
            .iter()
            .map(|&i| table.column_names()[i].clone())
            .collect(),
        table_digest: table.source_digest().to_string(),
    }
}

fn greedy(table: &MetadataTable, opts: &CaptionOptions) -> Result<Vec<usize>> {
    if opts.max_columns == 0 {
        return Err(CaptionError::ZeroMaxColumns);
    }
    let n_classes = table.len();
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = count_distinct(table, &chosen);
    while chosen.len() < opts.max_columns && current < n_classes {
        let mut best: Option<(usize, usize)> = None;
        for candidate in 0..table.column_names().len() {
            if chosen.contains(&candidate) || !within_budget(table, &chosen, candidate, opts) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(candidate);
            let gain = count_distinct(table, &trial) - current;
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((candidate, gain));
            }
        }
        let Some((column, gain)) = best else { break };
        chosen.push(column);
        current += gain;
    }
    Ok(chosen)
}

/// Greedy forward selection: each round adds the column with the largest
/// distinctness gain (lowest table index on ties) until every class is
/// distinct, no column helps, or `max_columns` columns are chosen.
pub fn select_columns(table: &MetadataTable, max_columns: usize) -> Result<ColumnSelection> {
    select_columns_with(
        table,
        &CaptionOptions {
            max_columns,
            ..CaptionOptions::default()
        },
    )
}

/// Greedy selection under explicit options. `fill_varying_columns` is not
/// applied here; see [`generate_caption_set_with`].
pub fn select_columns_with(table: &MetadataTable, opts: &CaptionOptions) -> Result<ColumnSelection> {
    Ok(selection_from(table, greedy(table, opts)?))
}

fn varies(table: &MetadataTable, index: usize) -> bool {
    let first = table.records()[0].value_at(index);
    table.records().iter().any(|r| r.value_at(index) != first)
}

fn caption_selection(table: &MetadataTable, opts: &CaptionOptions) -> Result<ColumnSelection> {
    let mut chosen = greedy(table, opts)?;
    if opts.fill_varying_columns {
        for index in 0..table.column_names().len() {
            if chosen.len() >= opts.max_columns {
                break;
            }
            if !chosen.contains(&index)
                && varies(table, index)
                && within_budget(table, &chosen, index, opts)
            {
                chosen.push(index);
            }
        }
    }
    Ok(selection_from(table, chosen))
}

/// Renders the caption of `class_id` under `selection`, which must have been
/// made for this exact table.
pub fn render_caption(
    table: &MetadataTable,
    class_id: u64,
    selection: &ColumnSelection,
    template: &CaptionTemplate,
) -> Result<String> {
    if selection.table_digest != table.source_digest() {
        return Err(CaptionError::DigestMismatch {
            expected: selection.table_digest.clone(),
            found: table.source_digest().to_string(),
        });
    }
    let mut indices = resolve_indices(table, &selection.columns)?;
    indices.sort_unstable();
    let record = table
        .record(class_id)
        .ok_or(CaptionError::UnknownClass(class_id))?;
    let caption = template.render(indices.iter().map(|&i| record.value_at(i).unwrap_or("")));
    if caption.is_empty() {
        return Err(CaptionError::EmptyCaption(class_id));
    }
    Ok(caption)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionSet {
    pub captions: BTreeMap<u64, String>,
    pub selection: ColumnSelection,
    pub template: CaptionTemplate,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionDocument {
    template: CaptionTemplate,
    columns: Vec<String>,
    distinctness: usize,
    captions: BTreeMap<u64, String>,
    table_digest: String,
}

impl CaptionSet {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn get(&self, class_id: u64) -> Option<&str> {
        self.captions.get(&class_id).map(String::as_str)
    }

    /// Groups of two or more classes that share a caption.
    pub fn collisions(&self) -> Vec<Vec<u64>> {
        let mut by_text: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for (id, text) in &self.captions {
            by_text.entry(text).or_default().push(*id);
        }
        by_text.into_values().filter(|ids| ids.len() > 1).collect()
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let doc = CaptionDocument {
            template: self.template.clone(),
            columns: self.selection.columns.clone(),
            distinctness: self.selection.distinctness,
            captions: self.captions.clone(),
            table_digest: self.selection.table_digest.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("caption document serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: CaptionDocument = serde_json::from_slice(bytes)?;
        Ok(Self {
            captions: doc.captions,
            selection: ColumnSelection {
                columns: doc.columns,
                distinctness: doc.distinctness,
                table_digest: doc.table_digest,
            },
            template: doc.template,
        })
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_json_bytes())
    }
}

pub fn generate_caption_set(
    table: &MetadataTable,
    template: &CaptionTemplate,
    max_columns: usize,
) -> Result<CaptionSet> {
    generate_caption_set_with(
        table,
        &CaptionOptions {
            template: template.clone(),
            max_columns,
            ..CaptionOptions::default()
        },
    )
}

pub fn generate_caption_set_with(table: &MetadataTable, opts: &CaptionOptions) -> Result<CaptionSet> {
    let selection = caption_selection(table, opts)?;
    let captions = table
        .class_ids()
        .map(|id| Ok((id, render_caption(table, id, &selection, &opts.template)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(CaptionSet {
        captions,
        selection,
        template: opts.template.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SIX_SPECIES: &str = include_str!("../data/six_species.csv");

    fn csv(text: &str) -> MetadataTable {
        MetadataTable::parse_csv(text.as_bytes()).unwrap()
    }

    fn rows(cols: usize, data: &[&[&str]]) -> MetadataTable {
        let names = (0..cols).map(|i| format!("c{i}")).collect();
        let rows = data
            .iter()
            .enumerate()
            .map(|(id, r)| (id as u64, r.iter().map(|v| Some(v.to_string())).collect()))
            .collect();
        MetadataTable::from_rows(names, rows).unwrap()
    }

    /// Independent oracle: join values with a space and count distinct strings.
    fn oracle_score(table: &MetadataTable, subset: &[usize]) -> usize {
        if subset.is_empty() {
            return 1;
        }
        table
            .records()
            .iter()
            .map(|r| {
                subset
                    .iter()
                    .map(|&i| r.value_at(i).unwrap_or(""))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<HashSet<_>>()
            .len()
    }

    fn all_subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
        (0u32..1 << n).map(move |mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
    }

    #[test]
    fn six_species_golden_captions() {
        let table = csv(SIX_SPECIES);
        let set = generate_caption_set(&table, &CaptionTemplate::default(), 3).unwrap();
        let expected = [
            "A photo of the Buff-tailed Coronet Birds Boissonneaua flavescens",
            "A photo of the Common Blue Crab Animalia Callinectes sapidus",
            "A photo of the Imperial Moth Insects Eacles imperialis",
            "A photo of the Oakmoss Fungi Evernia prunastri",
            "A photo of the Pacific Purple Sea Urchin Animalia Strongylocentrotus purpuratus",
            "A photo of the Pine White Insects Neophasia menapia",
        ];
        assert_eq!(set.captions.values().collect::<Vec<_>>(), expected);
        assert_eq!(set.selection.distinctness, 6);
        assert_eq!(set.to_json_bytes(), generate_caption_set(&table, &CaptionTemplate::default(), 3).unwrap().to_json_bytes());
    }

    #[test]
    fn render_single_records() {
        let table = csv(
            "class_id,common_name,kingdom,binomial\n\
             0,Common Blue Crab,Animalia,Callinectes sapidus\n\
             1,Oakmoss,Fungi,Evernia prunastri\n\
             2,Oakmoss,,Evernia prunastri\n",
        );
        let selection = ColumnSelection {
            columns: vec!["common_name".into(), "kingdom".into(), "binomial".into()],
            distinctness: 3,
            table_digest: table.source_digest().into(),
        };
        let t = CaptionTemplate::default();
        assert_eq!(
            render_caption(&table, 0, &selection, &t).unwrap(),
            "A photo of the Common Blue Crab Animalia Callinectes sapidus"
        );
        assert_eq!(
            render_caption(&table, 1, &selection, &t).unwrap(),
            "A photo of the Oakmoss Fungi Evernia prunastri"
        );
        assert_eq!(
            render_caption(&table, 2, &selection, &t).unwrap(),
            "A photo of the Oakmoss Evernia prunastri"
        );
    }

    #[test]
    fn render_rejects_foreign_selection() {
        let a = csv(SIX_SPECIES);
        let b = csv("class_id,common_name\n0,X\n");
        let sel = select_columns(&b, 1).unwrap();
        assert!(matches!(
            render_caption(&a, 0, &sel, &CaptionTemplate::default()),
            Err(CaptionError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn empty_subset_scores_one() {
        let t = rows(1, &[&["a"], &["b"], &["c"], &["d"], &["e"], &["f"], &["g"], &["h"], &["i"], &["j"]]);
        assert_eq!(distinctness_score(&t, &[] as &[&str]).unwrap(), 1);
        assert_eq!(distinctness_score(&t, &["c0"]).unwrap(), 10);
        assert!(distinctness_score(&t, &["nope"]).is_err());
    }

    #[test]
    fn six_species_binomial_fully_distinct() {
        assert_eq!(distinctness_score(&csv(SIX_SPECIES), &["binomial"]).unwrap(), 6);
    }

    #[test]
    fn engineered_collisions_match_oracle() {
        let t = rows(
            3,
            &[
                &["x", "p", "1"],
                &["x", "q", "1"],
                &["y", "p", "2"],
                &["y", "p", "2"],
                &["z", "q", "1"],
            ],
        );
        for subset in all_subsets(3) {
            let names: Vec<String> = subset.iter().map(|i| format!("c{i}")).collect();
            assert_eq!(
                distinctness_score(&t, &names).unwrap(),
                oracle_score(&t, &subset),
                "subset {subset:?}"
            );
        }
    }

    #[test]
    fn single_perfect_column_takes_one_round() {
        let t = rows(2, &[&["a", "k"], &["b", "k"], &["c", "m"]]);
        let sel = select_columns(&t, 3).unwrap();
        assert_eq!(sel.columns, vec!["c0"]);
        assert_eq!(sel.distinctness, 3);
    }

    #[test]
    fn greedy_needs_two_columns() {
        // no single column separates all five, c1+c2 does
        let t = rows(
            4,
            &[
                &["a", "p", "u", "k"],
                &["a", "p", "v", "k"],
                &["a", "q", "u", "k"],
                &["b", "q", "v", "m"],
                &["b", "r", "w", "m"],
            ],
        );
        let sel = select_columns(&t, 2).unwrap();
        let best = all_subsets(4)
            .filter(|s| s.len() <= 2)
            .map(|s| oracle_score(&t, &s))
            .max()
            .unwrap();
        assert_eq!(best, 5);
        assert_eq!(sel.distinctness, best);
        assert_eq!(sel.columns.len(), 2);
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        let t = rows(2, &[&["a", "x"], &["a", "y"], &["b", "x"], &["b", "y"]]);
        let sel = select_columns(&t, 1).unwrap();
        assert_eq!(sel.columns, vec!["c0"]);
        assert_eq!(sel.distinctness, 2);
    }

    #[test]
    fn zero_max_columns_rejected() {
        assert!(matches!(
            select_columns(&csv(SIX_SPECIES), 0),
            Err(CaptionError::ZeroMaxColumns)
        ));
    }

    #[test]
    fn token_budget_skips_long_columns() {
        let t = rows(2, &[&["one two three four five six", "a"], &["one two three four five seven", "b"]]);
        let opts = CaptionOptions {
            max_columns: 2,
            token_budget: Some(6),
            ..CaptionOptions::default()
        };
        let sel = select_columns_with(&t, &opts).unwrap();
        assert_eq!(sel.columns, vec!["c1"]);
    }

    #[test]
    fn single_class_table() {
        let t = csv("class_id,name\n9,Oakmoss\n");
        let set = generate_caption_set(&t, &CaptionTemplate::default(), 3).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.selection.distinctness, 1);
        assert_eq!(set.get(9), Some("A photo of the"));
    }

    #[test]
    fn collisions_reported() {
        let t = rows(1, &[&["dup"], &["dup"], &["other"]]);
        let set = generate_caption_set(&t, &CaptionTemplate::default(), 1).unwrap();
        assert_eq!(set.collisions(), vec![vec![0, 1]]);
    }

    #[test]
    fn json_document_round_trip() {
        let set = generate_caption_set(&csv(SIX_SPECIES), &CaptionTemplate::indefinite(), 3).unwrap();
        let back = CaptionSet::from_json_bytes(&set.to_json_bytes()).unwrap();
        assert_eq!(back, set);
        let doc: serde_json::Value = serde_json::from_slice(&set.to_json_bytes()).unwrap();
        assert_eq!(doc["captions"]["2"], "A photo of a Imperial Moth Insects Eacles imperialis");
    }

    fn small_table() -> impl Strategy<Value = (usize, Vec<Vec<u8>>)> {
        (1usize..=5).prop_flat_map(|cols| {
            (
                Just(cols),
                prop::collection::vec(prop::collection::vec(0u8..3, cols), 1..20),
            )
        })
    }

    proptest! {
        #[test]
        fn monotone_in_added_column((cols, data) in small_table(), extra in 0usize..5) {
            let names: Vec<String> = (0..cols).map(|i| format!("c{i}")).collect();
            let rows = data
                .iter()
                .enumerate()
                .map(|(id, r)| (id as u64, r.iter().map(|v| Some(format!("v {v}"))).collect()))
                .collect();
            let t = MetadataTable::from_rows(names.clone(), rows).unwrap();
            let extra = names[extra % cols].clone();
            for subset in all_subsets(cols) {
                let base: Vec<String> = subset.iter().map(|&i| names[i].clone()).collect();
                let mut more = base.clone();
                if !more.contains(&extra) {
                    more.push(extra.clone());
                }
                prop_assert!(distinctness_score(&t, &base).unwrap() <= distinctness_score(&t, &more).unwrap());
            }
        }

        #[test]
        fn rendering_is_whitespace_normal(values in prop::collection::vec("[ a-z\t]{0,8}", 0..4)) {
            let out = CaptionTemplate::default().render(values.iter().map(String::as_str));
            prop_assert_eq!(out.trim(), out.as_str());
            prop_assert!(!out.contains("  "));
            prop_assert!(!out.contains('\t'));
        }
    }
}
