#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgr {

// K x K counts, rows = true class, columns = predicted class.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<int64_t> counts;
  std::vector<std::string> class_names;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k, std::vector<std::string> names = {})
      : num_classes(k),
        counts(static_cast<size_t>(k) * static_cast<size_t>(k), 0),
        class_names(std::move(names)) {
    if (class_names.empty())
      for (int i = 0; i < k; ++i) class_names.push_back("class" + std::to_string(i));
    if (static_cast<int>(class_names.size()) != k)
      throw std::invalid_argument("ConfusionMatrix: need one name per class");
  }

  ConfusionMatrix(std::vector<std::vector<int64_t>> rows,
                  std::vector<std::string> names = {})
      : ConfusionMatrix(static_cast<int>(rows.size()), std::move(names)) {
    for (int t = 0; t < num_classes; ++t) {
      if (static_cast<int>(rows[static_cast<size_t>(t)].size()) != num_classes)
        throw std::invalid_argument("ConfusionMatrix: ragged rows");
      for (int p = 0; p < num_classes; ++p)
        at(t, p) = rows[static_cast<size_t>(t)][static_cast<size_t>(p)];
    }
  }

  int64_t& at(int true_class, int predicted) {
    return counts[static_cast<size_t>(true_class) * num_classes + predicted];
  }
  int64_t at(int true_class, int predicted) const {
    return counts[static_cast<size_t>(true_class) * num_classes + predicted];
  }
  int64_t total() const {
    int64_t n = 0;
    for (int64_t c : counts) n += c;
    return n;
  }
  int64_t trace() const {
    int64_t n = 0;
    for (int i = 0; i < num_classes; ++i) n += at(i, i);
    return n;
  }
};

inline ConfusionMatrix confusion_matrix(const std::vector<int>& predictions,
                                        const std::vector<int>& labels, int k,
                                        std::vector<std::string> names = {}) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("confusion_matrix: " +
                                std::to_string(predictions.size()) +
                                " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  ConfusionMatrix cm(k, std::move(names));
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || predictions[i] < 0 ||
        predictions[i] >= k)
      throw std::out_of_range("confusion_matrix: class index out of range at sample " +
                              std::to_string(i));
    ++cm.at(labels[i], predictions[i]);
  }
  return cm;
}

struct PerClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<PerClassMetrics> per_class;
  std::vector<std::string> class_names;

  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "accuracy        " << accuracy << "\n";
    os << "macro precision " << macro_precision << "\n";
    os << "macro recall    " << macro_recall << "\n";
    os << "macro f1        " << macro_f1 << "\n";
    for (size_t i = 0; i < per_class.size(); ++i)
      os << "  " << class_names[i] << ": precision " << per_class[i].precision
         << "  recall " << per_class[i].recall << "  f1 " << per_class[i].f1
         << "\n";
    return os.str();
  }

  // machine-readable key=value form
  std::string to_kv() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "accuracy=" << accuracy << "\n";
    os << "macro_precision=" << macro_precision << "\n";
    os << "macro_recall=" << macro_recall << "\n";
    os << "macro_f1=" << macro_f1 << "\n";
    for (size_t i = 0; i < per_class.size(); ++i) {
      os << class_names[i] << ".precision=" << per_class[i].precision << "\n";
      os << class_names[i] << ".recall=" << per_class[i].recall << "\n";
      os << class_names[i] << ".f1=" << per_class[i].f1 << "\n";
    }
    return os.str();
  }
};

// One-vs-rest per class; macro values are unweighted means. A class that is
// never predicted contributes precision 0, and F1 0 if it also has no hits.
inline MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total <= 0)
    throw std::invalid_argument("metrics_from_confusion: empty matrix");
  MetricsReport report;
  report.class_names = cm.class_names;
  report.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  for (int c = 0; c < cm.num_classes; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    double fp = 0.0, fn = 0.0;
    for (int o = 0; o < cm.num_classes; ++o) {
      if (o == c) continue;
      fp += static_cast<double>(cm.at(o, c));
      fn += static_cast<double>(cm.at(c, o));
    }
    PerClassMetrics m;
    m.precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
    m.recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
    m.f1 = 2.0 * tp + fp + fn > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
    report.per_class.push_back(m);
    report.macro_precision += m.precision;
    report.macro_recall += m.recall;
    report.macro_f1 += m.f1;
  }
  report.macro_precision /= cm.num_classes;
  report.macro_recall /= cm.num_classes;
  report.macro_f1 /= cm.num_classes;
  return report;
}

}  // namespace fgr
