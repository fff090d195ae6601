//! End-to-end behaviour of the forward/backward pipeline on scripted engines.

mod common;

use std::collections::HashSet;

use promptgrad::datasets::{QAItem, Splits, TaskFormat};
use promptgrad::extract::{grade, ExtractionRule};
use promptgrad::gateway::{
    cache_key, ChatMessage, ChatRequest, MockMatcher, MockReply, MockScript, Role,
};
use promptgrad::optimizer::{
    evaluate_on_dev, run_baseline, run_optimization, OptimizerConfig, Persistence,
    DEFAULT_SEED_PROMPT,
};
use promptgrad::strategies::{build_cot, ExemplarPool, PromptStrategy};
use promptgrad::textgrad::{forward, PromptVariable, Stage, Tape};

use common::*;

fn ternary_item(id: &str, gold: &str) -> QAItem {
    QAItem::ternary(
        id,
        format!("Context for {id}."),
        format!("Question {id}?"),
        gold,
    )
}

#[test]
fn one_iteration_walkthrough() {
    let format = TaskFormat::ternary(true);
    let rule = ExtractionRule::for_format(&format);
    let prediction = "Based on the study, the answer is yes.";
    let loss = "The response says yes, but the ground truth is no. The study's negative result was ignored.";
    let rewrite =
        "You are an evidence-based medical assistant. Weigh negative findings before answering.";

    let task = MockScript::new()
        .rule(
            MockMatcher::SystemContains("evidence-based".into()),
            MockReply::text("The answer is no."),
        )
        .catch_all(prediction);
    let backward = MockScript::new()
        .contains(marker(Stage::Loss), loss)
        .contains(
            marker(Stage::ResponseGradient),
            "Do not ignore negative results.",
        )
        .contains(
            marker(Stage::PromptGradient),
            "Tell the assistant to weigh negative findings.",
        )
        .contains(
            marker(Stage::TgdStep),
            format!("<IMPROVED_PROMPT>{rewrite}</IMPROVED_PROMPT>"),
        );
    let r = rig(task, backward, None, 2);

    let splits = Splits {
        train: vec![ternary_item("train-0001", "no")],
        dev: vec![
            ternary_item("dev-0001", "no"),
            ternary_item("dev-0002", "no"),
        ],
        test: Vec::new(),
    };
    let cfg = OptimizerConfig {
        batch_size: 1,
        patience_n: 1,
        max_iterations: 1,
        ..Default::default()
    };
    let trace =
        run_optimization(&cfg, &splits, &format, &rule, &r.engines, Persistence::None).unwrap();

    assert_eq!(trace.seed.dev_accuracy, 0.0);
    assert_eq!(trace.iterations.len(), 1);
    let it = &trace.iterations[0];
    assert_eq!(it.candidate_prompt.as_deref(), Some(rewrite));
    assert_eq!(it.dev_accuracy, Some(1.0));
    assert!(it.accepted);
    assert_eq!(trace.best_prompt, rewrite);

    // The loss text reaches the response-gradient request verbatim.
    let calls = r.backward.calls();
    let rg = calls
        .iter()
        .find(|c| {
            c.last_user_text()
                .unwrap()
                .contains(marker(Stage::ResponseGradient))
        })
        .unwrap();
    assert!(rg.last_user_text().unwrap().contains(loss));
    let loss_call = calls
        .iter()
        .find(|c| c.last_user_text().unwrap().contains(marker(Stage::Loss)))
        .unwrap();
    assert!(loss_call.last_user_text().unwrap().contains(prediction));

    // The candidate becomes the system message of the dev evaluations.
    let candidate_calls: Vec<_> = r
        .task
        .calls()
        .into_iter()
        .filter(|c| c.system_text() == Some(rewrite))
        .collect();
    assert_eq!(candidate_calls.len(), 2);
    assert_eq!(candidate_calls[0].messages[0].role, Role::System);
}

#[test]
fn seed_prompt_is_first_message_verbatim() {
    let (format, _) = mc();
    let r = rig(MockScript::new().catch_all("A"), MockScript::new(), None, 1);
    let rec = forward(
        &mc_item("x-0001", "A"),
        &format,
        &PromptVariable::trainable(DEFAULT_SEED_PROMPT),
        &r.engines,
        Stage::Forward,
        &mut Tape::new(),
    )
    .unwrap();
    assert_eq!(rec.messages[0], ChatMessage::system(DEFAULT_SEED_PROMPT));
    let sent = &r.task.calls()[0];
    assert_eq!(sent.messages[0], ChatMessage::system(DEFAULT_SEED_PROMPT));
    assert_eq!(sent.messages.len(), 2);
}

#[test]
fn dev_accuracy_is_fraction_correct() {
    let (format, rule) = mc();
    let dev = mc_items("dev-", 50);
    let correct: HashSet<String> = dev.iter().take(40).map(|i| i.id.clone()).collect();
    let task = MockScript::new().rule(
        MockMatcher::CatchAll,
        MockReply::func(move |req| {
            let id = item_id(req.last_user_text().unwrap());
            Ok(if correct.contains(id) {
                gold_of(id)
            } else {
                wrong_of(id)
            }
            .to_owned())
        }),
    );
    let r = rig(task, MockScript::new(), None, 4);
    let acc = evaluate_on_dev(
        DEFAULT_SEED_PROMPT,
        &dev,
        &format,
        &rule,
        &r.engines,
        &mut Tape::new(),
    )
    .unwrap();
    assert_eq!(acc, 0.80);
}

#[test]
fn perturbed_requests_have_distinct_digests() {
    let base = ChatRequest::new(
        "model",
        vec![
            ChatMessage::system("You are helpful."),
            ChatMessage::user("Question?"),
        ],
    );
    let mut variants = vec![base.clone()];
    for i in 0..20u32 {
        variants.push(ChatRequest::new(
            format!("model-{i}"),
            base.messages.clone(),
        ));
        variants.push(base.clone().with_temperature(0.05 * (i + 1) as f64));
        variants.push(base.clone().with_max_tokens(100 + i));
        variants.push(base.clone().with_seed(Some(i as u64)));
        let mut m = base.messages.clone();
        m[1].content.push_str(&" ".repeat(i as usize + 1));
        variants.push(ChatRequest::new("model", m));
    }
    variants.truncate(100);
    let digests: HashSet<String> = variants.iter().map(cache_key).collect();
    assert_eq!(variants.len(), 100);
    assert_eq!(digests.len(), 100);
    assert_eq!(cache_key(&base), cache_key(&base.clone()));
}

#[test]
fn random_ternary_baseline_near_one_third() {
    let labels = ["yes", "no", "maybe"];
    let items: Vec<QAItem> = (0..3000)
        .map(|i| ternary_item(&format!("t-{i}"), labels[i % 3]))
        .collect();
    let format = TaskFormat::ternary(true);
    let rule = ExtractionRule::for_format(&format);
    let r = rig(
        MockScript::new().catch_all("{{random:yes|no|maybe}}"),
        MockScript::new(),
        None,
        8,
    );
    let eval = run_baseline(
        &PromptStrategy::zero_shot(),
        &ExemplarPool::default(),
        &items,
        &format,
        &rule,
        &r.engines,
        &mut Tape::new(),
    )
    .unwrap();
    assert!(
        (eval.accuracy - 1.0 / 3.0).abs() <= 0.03,
        "{}",
        eval.accuracy
    );
}

#[test]
fn random_mc_baseline_near_one_quarter() {
    let (format, rule) = mc();
    let items = mc_items("q-", 1000);
    let r = rig(
        MockScript::new().catch_all("{{random:A|B|C|D}}"),
        MockScript::new(),
        None,
        8,
    );
    let eval = run_baseline(
        &PromptStrategy::zero_shot(),
        &ExemplarPool::default(),
        &items,
        &format,
        &rule,
        &r.engines,
        &mut Tape::new(),
    )
    .unwrap();
    assert!((eval.accuracy - 0.25).abs() <= 0.04, "{}", eval.accuracy);
    assert_eq!(eval.graded.len(), 1000);
}

#[test]
fn cot_transcript_grades_to_gold() {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/golden_transcripts.json"
    );
    let fixture: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let item: QAItem = serde_json::from_value(fixture["items"]["viral"].clone()).unwrap();
    let response = fixture["cases"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["case"] == "viral/cot")
        .unwrap()["response"]
        .as_str()
        .unwrap()
        .to_owned();
    let format = TaskFormat::multiple_choice("ABCD").unwrap();
    let messages = build_cot(&item, &format).unwrap();
    assert_eq!(messages[0].role, Role::System);
    assert!(messages[0].content.contains("<answer>"));

    let r = rig(
        MockScript::new().catch_all(response.clone()),
        MockScript::new(),
        None,
        1,
    );
    let eval = run_baseline(
        &PromptStrategy::cot(),
        &ExemplarPool::default(),
        std::slice::from_ref(&item),
        &format,
        &ExtractionRule::answer_tag(&['A', 'B', 'C', 'D']),
        &r.engines,
        &mut Tape::new(),
    )
    .unwrap();
    assert_eq!(eval.graded[0].extracted.as_deref(), Some("B"));
    assert!(eval.graded[0].correct);
    let direct = grade(&item, &response, &ExtractionRule::for_format(&format)).unwrap();
    assert_eq!(direct.extracted.as_deref(), Some("B"));
}
