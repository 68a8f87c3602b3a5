#include "bundleseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>

namespace bundleseg::metrics {

double dice(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("dice: mask dims differ " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
  std::size_t inter = 0;
  std::size_t sum = 0;
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    inter += da[i] & db[i];
    sum += da[i] + db[i];
  }
  if (sum == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sum);
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate agg;
  agg.n = values.size();
  if (values.empty()) return agg;
  double sum = 0.0;
  for (double v : values) sum += v;
  agg.mean = sum / static_cast<double>(agg.n);
  double sq = 0.0;
  for (double v : values) sq += (v - agg.mean) * (v - agg.mean);
  agg.stddev = std::sqrt(sq / static_cast<double>(agg.n));
  return agg;
}

DiceReport evaluate(const std::vector<SubjectMask>& predictions, const std::vector<SubjectMask>& references,
                    const std::string& method, const std::string& bundle) {
  std::map<std::string, const BinaryMask*> refs;
  for (const auto& [id, mask] : references) {
    if (!refs.emplace(id, &mask).second) throw PairingError("duplicate reference subject " + id);
  }
  std::map<std::string, const BinaryMask*> preds;
  for (const auto& [id, mask] : predictions) {
    if (!preds.emplace(id, &mask).second) throw PairingError("duplicate prediction subject " + id);
    if (!refs.contains(id)) throw PairingError("no reference for subject " + id);
  }
  for (const auto& [id, mask] : refs) {
    if (!preds.contains(id)) throw PairingError("no prediction for subject " + id);
  }
  DiceReport report;
  std::vector<double> values;
  for (const auto& [id, pred] : preds) {
    const double d = dice(*pred, *refs.at(id));
    report.entries.push_back({id, bundle, method, d});
    values.push_back(d);
  }
  report.aggregate = aggregate(values);
  return report;
}

void write_table(std::ostream& out, const std::vector<DiceReport>& reports) {
  out << std::left << std::setw(16) << "subject" << std::setw(12) << "bundle" << std::setw(12) << "method"
      << "dice\n";
  for (const auto& r : reports) {
    for (const auto& e : r.entries) {
      out << std::setw(16) << e.subject << std::setw(12) << e.bundle << std::setw(12) << e.method << std::fixed
          << std::setprecision(4) << e.dice << '\n';
    }
  }
  for (const auto& r : reports) {
    const std::string method = r.entries.empty() ? "-" : r.entries.front().method;
    out << std::setw(12) << method << " mean " << std::fixed << std::setprecision(4) << r.aggregate.mean << " std "
        << r.aggregate.stddev << " n " << r.aggregate.n << '\n';
  }
  out << std::defaultfloat;
}

void write_records(std::ostream& out, const std::vector<DiceReport>& reports) {
  out << "subject,bundle,method,dice\n";
  for (const auto& r : reports) {
    for (const auto& e : r.entries) {
      out << e.subject << ',' << e.bundle << ',' << e.method << ',' << std::setprecision(17) << e.dice << '\n';
    }
  }
}

}  // namespace bundleseg::metrics
