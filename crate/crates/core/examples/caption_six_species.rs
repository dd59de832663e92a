// Captions for the six-species table shipped in data/six_species.csv, with the
// default "A photo of the" template and the indefinite-article variant.
//
//     cargo run --example caption_six_species

use litforge::caption::{generate_caption_set_with, CaptionOptions, CaptionTemplate};
use litforge::metadata::{load_metadata, validate_table, Format};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/six_species.csv");
    let table = load_metadata(&path, Format::Csv)?;
    for finding in validate_table(&table) {
        println!("finding: {finding:?}");
    }

    let set = generate_caption_set_with(&table, &CaptionOptions::default())?;
    println!(
        "columns {:?} separate {} of {} classes",
        set.selection.columns,
        set.selection.distinctness,
        table.len()
    );
    for (id, caption) in &set.captions {
        println!("{id:>2}  {caption}");
    }

    let opts = CaptionOptions {
        template: CaptionTemplate::indefinite(),
        ..CaptionOptions::default()
    };
    let alt = generate_caption_set_with(&table, &opts)?;
    println!("\nindefinite template:");
    for caption in alt.captions.values() {
        println!("    {caption}");
    }
    println!("caption set digest {}", set.digest());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
