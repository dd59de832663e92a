// Greedy column selection on a small table where two species share a common
// name, plus the fill phase used for captions and the effect of a word budget.
//
//     cargo run --example column_selection

use litforge::caption::{
    distinctness_score, generate_caption_set_with, select_columns, select_columns_with, CaptionOptions,
};
use litforge::metadata::MetadataTable;

const TABLE: &str = "\
class_id,common_name,supercategory,binomial,kingdom
0,Mourning Cloak,Insects,Nymphalis antiopa,Animalia
1,Red Admiral,Insects,Vanessa atalanta,Animalia
2,Red Admiral,Insects,Vanessa indica,Animalia
3,Barn Owl,Birds,Tyto alba,Animalia
4,Fly Agaric,Fungi,Amanita muscaria,Fungi
5,Death Cap,Fungi,Amanita phalloides,Fungi
";

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let table = MetadataTable::parse_csv(TABLE.as_bytes())?;
    let columns = table.column_names().to_vec();

    println!("single-column distinctness ({} classes):", table.len());
    for c in &columns {
        println!("  {c:<14} {}", distinctness_score(&table, &[c])?);
    }

    let greedy = select_columns(&table, 3)?;
    println!("greedy pick {:?} -> {}", greedy.columns, greedy.distinctness);

    // captions keep adding varying columns after greedy stops
    let filled = generate_caption_set_with(&table, &CaptionOptions::default())?;
    println!("with fill   {:?} -> {}", filled.selection.columns, filled.selection.distinctness);
    println!("            e.g. {:?}", filled.captions[&2]);

    // the template already uses 4 words, so a budget of 5 only admits
    // one-word columns
    let tight = CaptionOptions {
        token_budget: Some(5),
        ..CaptionOptions::default()
    };
    let budgeted = select_columns_with(&table, &tight)?;
    println!("budget 5    {:?} -> {}", budgeted.columns, budgeted.distinctness);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
