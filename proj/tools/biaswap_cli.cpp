#include <CLI11.hpp>

#include <iostream>

#include "biaswap/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Bias-swap debiasing pipeline"};
  std::string stage, config_path, ablation;
  std::optional<long long> seed;
  bool force = false, oracle = false;
  app.add_option("stage", stage, "data | biased_train | partition | swapae_train | augment | debias_train | evaluate | report | all")
      ->required();
  app.add_option("--config", config_path, "key = value configuration file")->required()->check(CLI::ExistingFile);
  app.add_flag("--force", force, "recompute even when the stage is up to date");
  app.add_option("--seed", seed, "override the global seed");
  app.add_option("--ablation", ablation, "c1 (random pairs) or c2 (uniform crops)")->check(CLI::IsMember({"c1", "c2"}));
  app.add_flag("--oracle-swap", oracle, "replace the swap autoencoder by ground-truth recolouring");
  CLI11_PARSE(app, argc, argv);

  std::string current = stage;
  try {
    auto cfg = biaswap::PipelineConfig::load(config_path);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (!ablation.empty()) cfg = biaswap::ablated(cfg, biaswap::parse_ablation(ablation));
    if (oracle) cfg.set("ablation.oracle_swap", "true");
    biaswap::Pipeline pipeline(cfg);
    std::vector<biaswap::Stage> stages;
    if (stage == "all")
      stages = biaswap::all_stages();
    else
      stages = {biaswap::parse_stage(stage)};
    for (auto s : stages) {
      current = biaswap::to_string(s);
      pipeline.run_stage(s, force);
    }
    std::cout << pipeline.run_dir().string() << "\n";
    if (stage == "all" || stage == "report")
      std::cout << biaswap::io::read_text(pipeline.stage_dir(biaswap::Stage::report) / "summary.txt");
  } catch (const std::exception& e) {
    std::cerr << "stage " << current << " failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
