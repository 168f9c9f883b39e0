//! Gradients of one task's loss never reach prompt parameters owned by
//! other tasks (similar mode) or other groups (distant mode).

use transprompt::data::{build_synthetic_suite, SuiteConfig};
use transprompt::debias::{EntropySign, LossWeights};
use transprompt::model::{Instance, Mode, ModelConfig, PromptModel, Route};
use transprompt::params::{ParamGrads, ParamId};

fn config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        ..ModelConfig::default()
    }
}

fn weights() -> LossWeights {
    LossWeights {
        lambda1: 0.0,
        lambda2: 0.5,
        entropy_sign: EntropySign::Literal,
    }
}

fn owned(model: &PromptModel, key: &str) -> Vec<ParamId> {
    let mut ids = model.encoders[key].param_ids();
    ids.push(model.tables[key].table);
    ids
}

fn max_abs(grads: &ParamGrads, ids: &[ParamId]) -> f64 {
    ids.iter()
        .filter_map(|&id| grads.get(id))
        .flat_map(|m| m.as_slice().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn similar_mode_leaves_other_task_encoders_untouched() {
    let suite = build_synthetic_suite(&SuiteConfig::similar(), 2).unwrap();
    let model = PromptModel::new(Mode::Similar, &suite.tasks, &suite.groups, &suite.vocab, &config(), 4).unwrap();
    for task in &suite.tasks {
        let pool = &suite.data(&task.task_id).unwrap().pool;
        let instances: Vec<Instance> = pool[..2]
            .iter()
            .map(|ex| Instance {
                route: Route::Similar(task.task_id.clone()),
                example: ex,
                verbalizer: &task.verbalizer,
                target: task.label_index(&ex.label).unwrap(),
                score: 0.6,
                task_size: pool.len(),
            })
            .collect();
        let (g, loss, _) = model.batch_graph(&instances, &weights()).unwrap();
        let grads = g.backward(loss).param_grads(&g, &model.store);
        for other in suite.tasks.iter().filter(|t| t.task_id != task.task_id) {
            let ids = owned(&model, &format!("task.{}", other.task_id));
            assert!(max_abs(&grads, &ids) < 1e-12, "{} leaks into {}", task.task_id, other.task_id);
        }
        // The task's own encoder and the universal one do learn.
        assert!(max_abs(&grads, &owned(&model, &format!("task.{}", task.task_id))) > 0.0);
        assert!(max_abs(&grads, &owned(&model, "universal")) > 0.0);
    }
}

#[test]
fn distant_mode_leaves_foreign_type_encoders_untouched() {
    let suite = build_synthetic_suite(&SuiteConfig::distant(), 2).unwrap();
    let model = PromptModel::new(Mode::Distant, &suite.tasks, &suite.groups, &suite.vocab, &config(), 4).unwrap();
    for task in &suite.tasks {
        let pool = &suite.data(&task.task_id).unwrap().pool;
        let instances: Vec<Instance> = pool[..2]
            .iter()
            .map(|ex| Instance {
                route: Route::Distant(task.group_id.clone()),
                example: ex,
                verbalizer: &task.verbalizer,
                target: task.label_index(&ex.label).unwrap(),
                score: 0.6,
                task_size: pool.len(),
            })
            .collect();
        let (g, loss, _) = model.batch_graph(&instances, &weights()).unwrap();
        let grads = g.backward(loss).param_grads(&g, &model.store);
        for group in suite.groups.iter().filter(|gr| gr.group_id != task.group_id) {
            let key = format!("type.{}", group.group_id);
            let mut ids = owned(&model, &key);
            ids.push(model.gates[&group.group_id].theta);
            assert!(max_abs(&grads, &ids) < 1e-12, "{} leaks into {key}", task.task_id);
        }
        assert!(max_abs(&grads, &owned(&model, &format!("type.{}", task.group_id))) > 0.0);
    }
}
