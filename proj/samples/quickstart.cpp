// Builds a small Colored MNIST split, trains a GCE classifier for a few
// epochs, partitions the training set by bias score and prints the
// partition quality against the generator's ground truth.
//
//   ./quickstart [path/to/mnist.csv.gz]

#include <iostream>

#include "biaswap/bias_partition.hpp"
#include "biaswap/bias_swap_augment.hpp"
#include "biaswap/classifiers.hpp"
#include "biaswap/dataset.hpp"

int main(int argc, char** argv) {
  using namespace biaswap;
  const fs::path source = argc > 1 ? fs::path(argv[1]) : fs::path(BIASWAP_SOURCE_DIR) / "data" / "mnist_5k.csv.gz";

  BiasedDatasetSpec spec;
  spec.attributes = default_palette();
  spec.sizes = {2000, 500, 200};
  spec.jitter = 2;
  Dataset d = generate_colored_mnist(spec, load_mnist_csv(source, 100));

  TrainConfig tc;
  tc.loss = LossKind::gce;
  tc.epochs = 4;
  tc.snapshot_epochs = {};
  ClassifierSpec cs;
  cs.arch = Arch::conv_gap;
  auto biased = train_classifier(d.split(kTrainSplit), cs, tc);

  auto& train = d.splits.at(kTrainSplit);
  const Partition p = assign_pseudo_labels(score_examples(biased.model, train));
  apply_pseudo_labels(p, train);
  const PartitionMetrics m = partition_metrics(p, train);
  std::cout << report_thresholds(p).text << "partition F1 " << m.f1 << " (precision " << m.precision << ", recall " << m.recall << ")\n";

  const auto pairs = build_pairs(p, train, AugmentationPlan{});
  const auto swapped = oracle_recolor_swap(pairs, d);
  std::cout << swapped.size() << " recoloured swaps from " << p.guiding_ids.size() << " bias-guiding images\n";
  return 0;
}
