use weightscope::geometry::MaskKind;
use weightscope::pipeline::PipelineConfig;

const CHAPTER: &str = include_str!("../../../book/src/pipeline.md");

fn toml_block() -> &'static str {
    let start = CHAPTER.find("```toml\n").expect("toml listing") + "```toml\n".len();
    let len = CHAPTER[start..].find("```").expect("closing fence");
    &CHAPTER[start..start + len]
}

#[test]
fn pipeline_chapter_config_parses() {
    let cfg = PipelineConfig::from_toml_str(toml_block()).unwrap();
    assert_eq!(cfg.finetuned.len(), 3);
    assert_eq!(cfg.spectral.k, vec![64]);
    assert_eq!(cfg.analytics.window, 9);
    assert_eq!(cfg.masks.recipes.len(), 2);
    assert_eq!(cfg.masks.recipes[1].kind, MaskKind::RandomMatched);
    assert_eq!(cfg.masks.recipe_labels(), vec!["safe", "random_matched"]);
}
