// Straight-line forward oracle used to freeze golden values for the model test.
use cdfl::dataio::synth_generate;
use cdfl::model::{forward, init, ArchConfig};

fn main() {
    let arch = ArchConfig::desk(16, 4);
    let p = init(0, &arch).unwrap();
    let ds = synth_generate(4, 1, 16, 0.05, 123).unwrap();
    let out = forward(&p, &ds.samples[2].x).unwrap();
    println!("emb[0..4] = {:?}", &out.embedding[0..4]);
    println!("logits    = {:?}", out.logits);
}
