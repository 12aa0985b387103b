//! The prompt perturbation suite on two stub completers: one that loops
//! on a repeated last word and one that ignores its input.

use dysi::robustness::{
    extract_prompts, run_completion_suite, CompletionModel, PerturbationKind, PerturbationSpec, RepeatStub,
    SuiteConfig, UniformStub,
};

fn main() -> dysi::Result<()> {
    let paragraphs = [
        "from fairest creatures we desire increase that thereby beauty's rose might never die",
        "when forty winters shall besiege thy brow and dig deep trenches in thy beauty's field",
        "look in thy glass and tell the face thou viewest now is the time that face should form another",
    ];
    let prompts = extract_prompts(&paragraphs, 10)?;
    let words: Vec<String> = paragraphs
        .iter()
        .flat_map(|p| p.split_whitespace().map(String::from))
        .collect();
    let uniform = UniformStub { words: words.clone() };
    let models: [&dyn CompletionModel; 2] = [&RepeatStub, &uniform];

    let mut perturbations = vec![PerturbationSpec::new(PerturbationKind::Identity, 0)];
    perturbations.extend(PerturbationSpec::default_levels(PerturbationKind::LastWord));
    perturbations.push(PerturbationSpec::new(PerturbationKind::Ngram, 3));
    perturbations.push(PerturbationSpec::new(PerturbationKind::Replacement, 5));
    let config = SuiteConfig {
        perturbations,
        budget: 60,
        ..SuiteConfig::default()
    };
    let report = run_completion_suite(&models, &prompts, &config, &words, None)?;
    print!("{}", report.summary_csv());
    let r = &report.records[1];
    println!(
        "\n{} on {}:{}\n  prompt    {}\n  perturbed {}",
        r.model, r.perturbation.kind, r.perturbation.level, r.prompt, r.perturbed_prompt
    );
    Ok(())
}
