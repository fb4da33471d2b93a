#include "millassist/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "millassist/common.hpp"

namespace millassist::forecast {

using nlohmann::json;

void validate(const Hyperparams& h) {
  if (h.tree_count < 1) throw Error(ErrorCode::validation, "tree_count must be >= 1");
  if (h.max_depth < 0) throw Error(ErrorCode::validation, "max_depth must be >= 0");
  if (h.min_leaf < 1) throw Error(ErrorCode::validation, "min_leaf must be >= 1");
  if (!(h.feature_ratio > 0.0 && h.feature_ratio <= 1.0))
    throw Error(ErrorCode::validation, "feature_ratio must be in (0, 1]");
}

json to_json(const Hyperparams& h) {
  return json{{"tree_count", h.tree_count},   {"max_depth", h.max_depth},
              {"min_leaf", h.min_leaf},       {"feature_ratio", h.feature_ratio},
              {"seed", h.seed},               {"allow_degenerate_target", h.allow_degenerate_target}};
}

Hyperparams hyperparams_from_json(const json& j) {
  Hyperparams h;
  try {
    h.tree_count = j.value("tree_count", h.tree_count);
    h.max_depth = j.value("max_depth", h.max_depth);
    h.min_leaf = j.value("min_leaf", h.min_leaf);
    h.feature_ratio = j.value("feature_ratio", h.feature_ratio);
    h.seed = j.value("seed", h.seed);
    h.allow_degenerate_target = j.value("allow_degenerate_target", h.allow_degenerate_target);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed hyperparams: ") + e.what());
  }
  validate(h);
  return h;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::validation, "quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

namespace {

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
  bool missing_left = true;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<Row>& x, const std::vector<double>& y, const Hyperparams& h, ForestTask task,
              int classes, std::uint64_t seed)
      : x_(x), y_(y), h_(h), task_(task), classes_(classes), rng_(seed) {
    const std::size_t d = x.empty() ? 0 : x.front().size();
    mtry_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h.feature_ratio * static_cast<double>(d))));
    mtry_ = std::min(mtry_, d);
    order_.resize(d);
    std::iota(order_.begin(), order_.end(), 0);
    tree_.seed = seed;
  }

  Tree build(std::vector<int>& in_bag) {
    const std::size_t n = x_.size();
    std::vector<int> idx(n);
    for (auto& i : idx) {
      i = static_cast<int>(rng_.uniform_int(0, static_cast<std::int64_t>(n) - 1));
      in_bag[static_cast<std::size_t>(i)] = 1;
    }
    grow(idx, 0);
    return std::move(tree_);
  }

 private:
  std::vector<double> leaf_value(const std::vector<int>& idx) const {
    if (task_ == ForestTask::regression) {
      double s = 0.0;
      for (int i : idx) s += y_[static_cast<std::size_t>(i)];
      return {s / static_cast<double>(idx.size())};
    }
    std::vector<double> shares(static_cast<std::size_t>(classes_), 0.0);
    for (int i : idx) shares[static_cast<std::size_t>(y_[static_cast<std::size_t>(i)])] += 1.0;
    for (auto& s : shares) s /= static_cast<double>(idx.size());
    return shares;
  }

  bool pure(const std::vector<int>& idx) const {
    const double first = y_[static_cast<std::size_t>(idx.front())];
    return std::all_of(idx.begin(), idx.end(), [&](int i) { return y_[static_cast<std::size_t>(i)] == first; });
  }

  /// n * impurity: SSE for regression, n * Gini for classification.
  struct Acc {
    double n = 0.0, s = 0.0, q = 0.0;
    std::vector<double> counts;
  };

  void add(Acc& a, double yv) const {
    a.n += 1.0;
    if (task_ == ForestTask::regression) {
      a.s += yv;
      a.q += yv * yv;
    } else {
      a.counts[static_cast<std::size_t>(yv)] += 1.0;
    }
  }

  double impurity(const Acc& a) const {
    if (a.n == 0.0) return 0.0;
    if (task_ == ForestTask::regression) return std::max(0.0, a.q - a.s * a.s / a.n);
    double sq = 0.0;
    for (double c : a.counts) sq += c * c;
    return a.n - sq / a.n;
  }

  Acc empty_acc() const {
    Acc a;
    if (task_ == ForestTask::classification) a.counts.assign(static_cast<std::size_t>(classes_), 0.0);
    return a;
  }

  Split best_split(const std::vector<int>& idx) {
    // Partial Fisher-Yates picks the candidate features.
    for (std::size_t k = 0; k < mtry_; ++k) {
      const auto j = static_cast<std::size_t>(rng_.uniform_int(static_cast<std::int64_t>(k),
                                                               static_cast<std::int64_t>(order_.size()) - 1));
      std::swap(order_[k], order_[j]);
    }
    Split best;
    best.gain = 1e-12;
    const auto min_leaf = static_cast<std::size_t>(h_.min_leaf);
    std::vector<std::pair<double, int>> present;
    for (std::size_t k = 0; k < mtry_; ++k) {
      const std::size_t f = order_[k];
      present.clear();
      for (int i : idx)
        if (const auto& v = x_[static_cast<std::size_t>(i)][f]; v) present.emplace_back(*v, i);
      if (present.size() < 2 * min_leaf) continue;
      std::sort(present.begin(), present.end());

      Acc total = empty_acc();
      for (const auto& [v, i] : present) add(total, y_[static_cast<std::size_t>(i)]);
      const double parent = impurity(total);
      Acc left = empty_acc();
      for (std::size_t p = 0; p + 1 < present.size(); ++p) {
        add(left, y_[static_cast<std::size_t>(present[p].second)]);
        const std::size_t nl = p + 1, nr = present.size() - nl;
        if (present[p].first == present[p + 1].first) continue;
        if (nl < min_leaf || nr < min_leaf) continue;
        Acc right = empty_acc();
        right.n = total.n - left.n;
        right.s = total.s - left.s;
        right.q = total.q - left.q;
        for (std::size_t c = 0; c < right.counts.size(); ++c) right.counts[c] = total.counts[c] - left.counts[c];
        const double gain = parent - impurity(left) - impurity(right);
        if (gain > best.gain) {
          double mid = 0.5 * (present[p].first + present[p + 1].first);
          if (!(mid < present[p + 1].first)) mid = present[p].first;
          best = {static_cast<int>(f), mid, gain, nl >= nr};
        }
      }
    }
    return best;
  }

  int grow(const std::vector<int>& idx, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    tree_.nodes[static_cast<std::size_t>(id)].value = leaf_value(idx);
    if (depth >= h_.max_depth || idx.size() < 2 * static_cast<std::size_t>(h_.min_leaf) || pure(idx)) return id;
    const Split s = best_split(idx);
    if (s.feature < 0) return id;

    std::vector<int> left, right;
    for (int i : idx) {
      const auto& v = x_[static_cast<std::size_t>(i)][static_cast<std::size_t>(s.feature)];
      const bool go_left = v ? *v <= s.threshold : s.missing_left;
      (go_left ? left : right).push_back(i);
    }
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    auto& node = tree_.nodes[static_cast<std::size_t>(id)];
    node.feature = s.feature;
    node.threshold = s.threshold;
    node.missing_left = s.missing_left;
    node.left = l;
    node.right = r;
    return id;
  }

  const std::vector<Row>& x_;
  const std::vector<double>& y_;
  const Hyperparams& h_;
  ForestTask task_;
  int classes_;
  Rng rng_;
  std::size_t mtry_ = 1;
  std::vector<std::size_t> order_;
  Tree tree_;
};

}  // namespace

Forest::FitResult Forest::fit(const std::vector<Row>& x, const std::vector<double>& y, const Hyperparams& h,
                              ForestTask task, int classes) {
  validate(h);
  if (x.size() != y.size()) throw Error(ErrorCode::validation, "feature rows and targets differ in length");
  if (x.empty()) throw Error(ErrorCode::training, "no training samples");
  const std::size_t d = x.front().size();
  for (const auto& row : x) {
    if (row.size() != d) throw Error(ErrorCode::validation, "feature rows differ in width");
    for (const auto& v : row)
      if (v && !std::isfinite(*v)) throw Error(ErrorCode::validation, "non-finite feature value");
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw Error(ErrorCode::validation, "non-finite target");
    if (task == ForestTask::classification && (v < 0 || v >= classes || v != std::floor(v)))
      throw Error(ErrorCode::validation, "class index out of range");
  }
  if (task == ForestTask::classification && classes < 1) throw Error(ErrorCode::validation, "classes must be >= 1");

  FitResult out;
  out.forest.task_ = task;
  out.forest.classes_ = task == ForestTask::classification ? classes : 0;
  out.forest.features_ = d;
  const std::size_t width = task == ForestTask::regression ? 1 : static_cast<std::size_t>(classes);
  std::vector<std::vector<double>> oob_sum(x.size(), std::vector<double>(width, 0.0));
  std::vector<int> oob_n(x.size(), 0);

  const std::string base = std::to_string(h.seed) + ":tree:";
  for (int t = 0; t < h.tree_count; ++t) {
    const std::uint64_t seed = fnv1a64(base + std::to_string(t));
    std::vector<int> in_bag(x.size(), 0);
    TreeBuilder builder(x, y, h, task, classes, seed);
    out.forest.trees_.push_back(builder.build(in_bag));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (in_bag[i]) continue;
      const auto& v = out.forest.tree_output(out.forest.trees_.size() - 1, x[i]);
      for (std::size_t c = 0; c < width; ++c) oob_sum[i][c] += v[c];
      ++oob_n[i];
    }
  }
  out.oob.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (oob_n[i] == 0) continue;
    for (auto& v : oob_sum[i]) v /= oob_n[i];
    out.oob[i] = std::move(oob_sum[i]);
  }
  return out;
}

const std::vector<double>& Forest::tree_output(std::size_t tree, const Row& row) const {
  if (row.size() != features_)
    throw Error(ErrorCode::contract, "feature row has " + std::to_string(row.size()) + " values, model expects " +
                                         std::to_string(features_));
  const auto& nodes = trees_.at(tree).nodes;
  std::size_t n = 0;
  while (nodes[n].feature >= 0) {
    const auto& node = nodes[n];
    const auto& v = row[static_cast<std::size_t>(node.feature)];
    const bool go_left = v ? *v <= node.threshold : node.missing_left;
    n = static_cast<std::size_t>(go_left ? node.left : node.right);
  }
  return nodes[n].value;
}

std::vector<double> Forest::tree_predictions(const Row& row) const {
  std::vector<double> out;
  out.reserve(trees_.size());
  for (std::size_t t = 0; t < trees_.size(); ++t) out.push_back(tree_output(t, row).front());
  return out;
}

std::vector<double> Forest::mean_output(const Row& row) const {
  std::vector<double> sum;
  for (std::size_t t = 0; t < trees_.size(); ++t) {
    const auto& v = tree_output(t, row);
    if (sum.empty()) sum.assign(v.size(), 0.0);
    for (std::size_t c = 0; c < v.size(); ++c) sum[c] += v[c];
  }
  for (auto& s : sum) s /= static_cast<double>(trees_.size());
  return sum;
}

json Forest::to_json() const {
  json trees = json::array();
  for (const auto& t : trees_) {
    json nodes = json::array();
    for (const auto& n : t.nodes) nodes.push_back(json::array({n.feature, n.threshold, n.left, n.right, n.missing_left, n.value}));
    trees.push_back(json{{"seed", t.seed}, {"nodes", std::move(nodes)}});
  }
  return json{{"task", task_ == ForestTask::regression ? "regression" : "classification"},
              {"classes", classes_},
              {"features", features_},
              {"trees", std::move(trees)}};
}

Forest Forest::from_json(const json& j) {
  Forest f;
  try {
    const auto task = j.at("task").get<std::string>();
    if (task != "regression" && task != "classification") throw Error(ErrorCode::validation, "unknown forest task " + task);
    f.task_ = task == "regression" ? ForestTask::regression : ForestTask::classification;
    f.classes_ = j.at("classes").get<int>();
    f.features_ = j.at("features").get<std::size_t>();
    for (const auto& jt : j.at("trees")) {
      Tree t;
      t.seed = jt.at("seed").get<std::uint64_t>();
      for (const auto& jn : jt.at("nodes")) {
        TreeNode n;
        n.feature = jn.at(0).get<int>();
        n.threshold = jn.at(1).get<double>();
        n.left = jn.at(2).get<int>();
        n.right = jn.at(3).get<int>();
        n.missing_left = jn.at(4).get<bool>();
        n.value = jn.at(5).get<std::vector<double>>();
        t.nodes.push_back(std::move(n));
      }
      const auto count = static_cast<int>(t.nodes.size());
      // Children always follow their parent, which rules out cycles.
      for (int k = 0; k < count; ++k) {
        const auto& n = t.nodes[static_cast<std::size_t>(k)];
        const bool bad_split = n.feature >= 0 && (n.left <= k || n.right <= k || n.left >= count || n.right >= count);
        if (n.feature >= static_cast<int>(f.features_) || bad_split || n.value.empty())
          throw Error(ErrorCode::validation, "malformed tree node");
      }
      if (t.nodes.empty()) throw Error(ErrorCode::validation, "empty tree");
      f.trees_.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed forest: ") + e.what());
  }
  if (f.trees_.empty()) throw Error(ErrorCode::validation, "forest has no trees");
  return f;
}

}  // namespace millassist::forecast
