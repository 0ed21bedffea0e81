use setseg::model::load_model;
use setseg::scenegen::read_jsonl;

#[test]
fn diag_phrase_and_scores() {
    let model = load_model(std::path::Path::new("/tmp/exp/e1run/stage2")).unwrap();
    let samples = read_jsonl(std::path::Path::new("/tmp/exp/e1data/test.jsonl")).unwrap();
    let mut phrase_ok = 0;
    let mut n = 0;
    let mut sel_counts = Vec::new();
    for s in samples.iter().take(120) {
        let gen = model.generate_phrase(s).unwrap();
        if gen == s.phrase { phrase_ok += 1; }
        n += 1;
        let (_, pred, _) = model.forward(s, 0.5).unwrap();
        sel_counts.push((s.gt_masks.len(), pred.selected.len(),
            pred.scores.iter().cloned().fold(0.0f64, f64::max)));
        if n <= 12 {
            let gen_txt = setseg::scenegen::vocab::render_text(&gen).unwrap();
            println!("gt_n={} sel={} maxscore={:.3} phrase_gen={:?} phrase_gt={:?} instr={:?} stratum={:?}",
                s.gt_masks.len(), pred.selected.len(),
                pred.scores.iter().cloned().fold(0.0f64, f64::max),
                gen_txt,
                setseg::scenegen::vocab::render_text(&s.phrase).unwrap(),
                s.instruction_text, s.stratum);
        }
    }
    println!("phrase exact-match: {}/{}", phrase_ok, n);
    let over: usize = sel_counts.iter().filter(|(g, s, _)| s > g).count();
    let under: usize = sel_counts.iter().filter(|(g, s, _)| s < g).count();
    let exact: usize = sel_counts.iter().filter(|(g, s, _)| s == g).count();
    println!("selected vs gt: exact {} over {} under {}", exact, over, under);
    let nt_max: Vec<f64> = sel_counts.iter().filter(|(g, _, _)| *g == 0).map(|(_, _, m)| *m).collect();
    let tg_max: Vec<f64> = sel_counts.iter().filter(|(g, _, _)| *g > 0).map(|(_, _, m)| *m).collect();
    println!("max-score no-target samples: {:?}", &nt_max.iter().map(|x| (x*100.0).round()/100.0).collect::<Vec<_>>());
    println!("max-score target samples mean: {:.3}", tg_max.iter().sum::<f64>() / tg_max.len() as f64);
}
