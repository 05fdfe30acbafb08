#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "univa/eval.h"
#include "univa/simulator.h"
#include "univa/tokenizer.h"

namespace univa {

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

std::string catalog_to_jsonl(std::span<const AdItem> catalog);
std::vector<AdItem> catalog_from_jsonl(const std::string& text);

std::string users_to_jsonl(std::span<const UserProfile> users);
std::vector<UserProfile> users_from_jsonl(const std::string& text);

std::string requests_to_jsonl(std::span<const Request> requests);
std::vector<Request> requests_from_jsonl(const std::string& text);

struct Prediction {
  int64_t request_id = 0;
  std::vector<int64_t> items;
  std::vector<double> scores;
};

std::string predictions_to_jsonl(std::span<const Prediction> predictions);
std::vector<Prediction> predictions_from_jsonl(const std::string& text);

struct TruthRecord {
  int64_t request_id = 0;
  int64_t item = -1;
  double gmv = 0.0;
};

/// Requests with a target item, as {request_id, item, gmv} lines.
std::string truth_to_jsonl(std::span<const Request> requests);
/// Accepts truth lines or full request lines (target_item / target_gmv).
std::vector<TruthRecord> truth_from_jsonl(const std::string& text);

/// Joins predictions with truth by request id; requests without a prediction get an empty list.
std::vector<EvalSample> join_samples(std::span<const Prediction> predictions, std::span<const TruthRecord> truth);

std::string world_config_to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const std::string& text);

}  // namespace univa
