#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

namespace millassist::forecast {

/// One feature row; std::nullopt marks a missing value.
using Row = std::vector<std::optional<double>>;

enum class ForestTask { regression, classification };

struct Hyperparams {
  int tree_count = 100;
  int max_depth = 12;
  int min_leaf = 2;
  /// Fraction of features considered at each split (at least one).
  double feature_ratio = 0.5;
  std::uint64_t seed = 1;
  /// Fit a constant model on a constant target instead of failing.
  bool allow_degenerate_target = false;

  bool operator==(const Hyperparams&) const = default;
};

void validate(const Hyperparams& h);
nlohmann::json to_json(const Hyperparams& h);
Hyperparams hyperparams_from_json(const nlohmann::json& j);

/// Flat binary tree node. `feature < 0` marks a leaf.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;  ///< x <= threshold goes left
  int left = -1;
  int right = -1;
  bool missing_left = true;  ///< missing values follow the larger branch
  std::vector<double> value;  ///< regression: {mean}; classification: class shares

  bool operator==(const TreeNode&) const = default;
};

struct Tree {
  std::uint64_t seed = 0;
  std::vector<TreeNode> nodes;

  bool operator==(const Tree&) const = default;
};

/// Randomized tree ensemble: bootstrap rows, random feature subsets per
/// split, variance-reduction (regression) or Gini (classification) splits.
class Forest {
 public:
  struct FitResult;

  /// `y` holds targets, or class indices 0..classes-1 for classification.
  static FitResult fit(const std::vector<Row>& x, const std::vector<double>& y, const Hyperparams& h,
                       ForestTask task = ForestTask::regression, int classes = 0);

  ForestTask task() const { return task_; }
  int classes() const { return classes_; }
  std::size_t feature_count() const { return features_; }
  const std::vector<Tree>& trees() const { return trees_; }

  /// Leaf value of one tree.
  const std::vector<double>& tree_output(std::size_t tree, const Row& row) const;
  /// Regression: per-tree outputs.
  std::vector<double> tree_predictions(const Row& row) const;
  /// Element-wise mean of the leaf values across trees.
  std::vector<double> mean_output(const Row& row) const;

  nlohmann::json to_json() const;
  static Forest from_json(const nlohmann::json& j);

  bool operator==(const Forest&) const = default;

 private:
  ForestTask task_ = ForestTask::regression;
  int classes_ = 0;
  std::size_t features_ = 0;
  std::vector<Tree> trees_;
};

struct Forest::FitResult {
  Forest forest;
  /// Per row: mean output over trees that did not see the row, if any.
  std::vector<std::optional<std::vector<double>>> oob;
};

/// Linear-interpolated empirical quantile of `values` (q in [0, 1]).
double quantile(std::vector<double> values, double q);

}  // namespace millassist::forecast
