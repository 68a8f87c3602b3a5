#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "bundleseg/volume.hpp"

namespace bundleseg::metrics {

/// 2|A∩B| / (|A| + |B|); two empty masks score 1.
double dice(const BinaryMask& a, const BinaryMask& b);

struct DiceEntry {
  std::string subject;
  std::string bundle;
  std::string method;
  double dice = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  std::size_t n = 0;
};

struct DiceReport {
  std::vector<DiceEntry> entries;  // ordered by subject id
  Aggregate aggregate;
};

Aggregate aggregate(const std::vector<double>& values);

using SubjectMask = std::pair<std::string, BinaryMask>;

/// Throws PairingError unless both lists cover the same subject ids.
DiceReport evaluate(const std::vector<SubjectMask>& predictions, const std::vector<SubjectMask>& references,
                    const std::string& method, const std::string& bundle);

/// Fixed-width table: one row per entry, then mean/std/n per method.
void write_table(std::ostream& out, const std::vector<DiceReport>& reports);

/// CSV with header "subject,bundle,method,dice"; dice printed with 17
/// significant digits so values round-trip exactly.
void write_records(std::ostream& out, const std::vector<DiceReport>& reports);

}  // namespace bundleseg::metrics
