// Map free-text answers onto a vocabulary by cosine similarity over hashed
// character trigrams.

use mar_harness::mapper::{cosine, ground, split_reply, EmbeddingProvider, TrigramEmbedder, VocabIndex, VocabItem};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let embedder = TrigramEmbedder::default();
    let labels = ["baked good", "beverage", "plant", "snake", "water", "water bottle", "coffee"];
    let items: Vec<VocabItem> = labels
        .iter()
        .map(|l| VocabItem {
            id: l.replace(' ', "_"),
            label: l.to_string(),
        })
        .collect();
    let index = VocabIndex::build(items.clone(), &embedder)?;

    for output in ["Beverage.", "baked goods", "a kind of plant", "\"Water\""] {
        let ranking = ground(output, &index, &embedder)?;
        let top: Vec<String> = ranking.entries.iter().take(3).map(|(id, s)| format!("{id} {s:.3}")).collect();
        println!("{output:>18} -> {}", top.join(", "));
    }

    let a = embedder.embed("water")?;
    let b = embedder.embed("water bottle")?;
    println!("cos(water, water bottle) = {:.6}", cosine(&a, &b)?);

    // Multiple choice: the index holds only the options and accepts letters.
    let options = VocabIndex::build_lettered(items[2..5].to_vec(), &embedder)?;
    let (relation, answer) = split_reply("Relation: subclass of\nAnswer: B) snake");
    println!("relation {relation:?}, answer {answer:?} -> {:?}", ground(&answer, &options, &embedder)?.top());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
