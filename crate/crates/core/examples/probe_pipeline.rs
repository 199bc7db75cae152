use elvc::corpus::{SpeechType, Split};
use elvc::pipeline::{recognition_variant, ExperimentConfig, RecognitionVariant, TrainBudget};
use elvc::recognition::{dataset_cer, dataset_from_entries, RecognizerModel};

fn main() {
    let work = std::path::PathBuf::from("/tmp/elvc_probe2");
    let corpus_dir = std::fs::read_dir(work.join("store")).unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("corpus-"))
        .unwrap().path();
    let manifest = elvc::corpus::load_manifest(&corpus_dir.join("manifest.jsonl")).unwrap();
    let base = ExperimentConfig::desk_default();
    let dsp = base.dsp.clone();
    let items = |el: bool, split: Split| {
        let entries = manifest.select(|e| {
            e.split == split && (e.speech_type == SpeechType::El) == el && e.utterance_id.starts_with("tgt_")
        });
        dataset_from_entries(&manifest, &entries, &dsp).unwrap()
    };
    let el_test = items(true, Split::Test);
    let typ_test = items(false, Split::Test);

    for (lr2, ep2, lr3, ep3) in [(2e-2f64, 8usize, 1e-2f64, 4usize), (5e-2, 8, 2e-2, 4)] {
        let mut config = base.clone();
        config.rec_stage2 = TrainBudget::new(ep2, lr2, 8).with_sgd(0.9);
        config.rec_stage3 = TrainBudget::new(ep3, lr3, 8).with_sgd(0.9);
        let ckpt = recognition_variant(&config, &work, RecognitionVariant::SidMasked).unwrap();
        let model = RecognizerModel::load(&ckpt).unwrap();
        println!("sgd lr2={lr2} lr3={lr3} sid_masked: EL {:.3} TYP {:.3}",
            dataset_cer(&model, &el_test).unwrap(), dataset_cer(&model, &typ_test).unwrap());
    }
}
