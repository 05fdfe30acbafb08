#include "univa/io.h"

#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace univa {

using json = nlohmann::json;

namespace {

template <typename F>
void for_each_line(const std::string& text, const char* what, F&& f) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      f(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(std::string(what) + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(std::string(what) + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string catalog_to_jsonl(std::span<const AdItem> catalog) {
  std::string out;
  for (const auto& it : catalog) {
    json j = {{"id", it.id},
              {"embedding", it.embedding},
              {"opt_goal", it.opt_goal},
              {"roi_target", it.roi_target},
              {"industry", it.industry},
              {"bid", it.bid},
              {"gmv", it.gmv}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<AdItem> catalog_from_jsonl(const std::string& text) {
  std::vector<AdItem> items;
  for_each_line(text, "catalog", [&](const json& j) {
    AdItem it;
    it.id = j.at("id").get<int64_t>();
    // nlohmann reads NaN literals as null, so a null entry here is a rejected non-finite value.
    for (const auto& x : j.at("embedding")) {
      if (!x.is_number()) throw Error("item " + std::to_string(it.id) + ": non-numeric embedding entry");
      it.embedding.push_back(x.get<double>());
    }
    it.opt_goal = j.at("opt_goal").get<int>();
    it.roi_target = j.at("roi_target").get<int>();
    it.industry = j.at("industry").get<int>();
    it.bid = j.at("bid").get<double>();
    it.gmv = j.value("gmv", 0.0);
    validate_item(it, items.empty() ? it.embedding.size() : items.front().embedding.size());
    items.push_back(std::move(it));
  });
  return items;
}

std::string users_to_jsonl(std::span<const UserProfile> users) {
  std::string out;
  for (const auto& u : users) {
    json j = {{"id", u.id}, {"preference", u.preference}, {"segment", u.segment}, {"geo", u.geo}, {"history", u.history}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<UserProfile> users_from_jsonl(const std::string& text) {
  std::vector<UserProfile> users;
  for_each_line(text, "users", [&](const json& j) {
    UserProfile u;
    u.id = j.at("id").get<int64_t>();
    u.preference = j.at("preference").get<Vec>();
    u.segment = j.at("segment").get<int>();
    u.geo = j.at("geo").get<int>();
    u.history = j.at("history").get<std::vector<int64_t>>();
    users.push_back(std::move(u));
  });
  return users;
}

std::string requests_to_jsonl(std::span<const Request> requests) {
  std::string out;
  for (const auto& r : requests) {
    json j = {{"id", r.id},
              {"user_id", r.user_id},
              {"user_tokens", r.context.user_tokens},
              {"organic_tokens", r.context.organic_tokens},
              {"env_tokens", r.context.env_tokens},
              {"item_tokens", r.context.item_tokens},
              {"history", r.history},
              {"targeting",
               {{"segment", r.targeting.segment},
                {"geo", r.targeting.geo},
                {"excluded_industries", r.targeting.excluded_industries},
                {"density", r.targeting.density},
                {"salt", r.targeting.salt}}},
              {"target_item", r.target_item},
              {"target_gmv", r.target_gmv}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<Request> requests_from_jsonl(const std::string& text) {
  std::vector<Request> reqs;
  for_each_line(text, "requests", [&](const json& j) {
    Request r;
    r.id = j.at("id").get<int64_t>();
    r.user_id = j.at("user_id").get<int64_t>();
    r.context.user_tokens = j.at("user_tokens").get<std::vector<int>>();
    r.context.organic_tokens = j.at("organic_tokens").get<std::vector<int>>();
    r.context.env_tokens = j.at("env_tokens").get<std::vector<int>>();
    r.context.item_tokens = j.at("item_tokens").get<std::vector<int>>();
    r.history = j.value("history", std::vector<int64_t>{});
    if (j.contains("targeting")) {
      const auto& t = j["targeting"];
      r.targeting.segment = t.at("segment").get<int>();
      r.targeting.geo = t.at("geo").get<int>();
      r.targeting.excluded_industries = t.at("excluded_industries").get<std::vector<int>>();
      r.targeting.density = t.at("density").get<double>();
      r.targeting.salt = t.at("salt").get<uint64_t>();
    }
    r.target_item = j.value("target_item", int64_t{-1});
    r.target_gmv = j.value("target_gmv", 0.0);
    reqs.push_back(std::move(r));
  });
  return reqs;
}

std::string predictions_to_jsonl(std::span<const Prediction> predictions) {
  std::string out;
  for (const auto& p : predictions) {
    json j = {{"request_id", p.request_id}, {"items", p.items}, {"scores", p.scores}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<Prediction> predictions_from_jsonl(const std::string& text) {
  std::vector<Prediction> out;
  for_each_line(text, "predictions", [&](const json& j) {
    Prediction p;
    p.request_id = j.at("request_id").get<int64_t>();
    p.items = j.at("items").get<std::vector<int64_t>>();
    p.scores = j.value("scores", std::vector<double>{});
    out.push_back(std::move(p));
  });
  return out;
}

std::string truth_to_jsonl(std::span<const Request> requests) {
  std::string out;
  for (const auto& r : requests) {
    if (r.target_item < 0) continue;
    out += json{{"request_id", r.id}, {"item", r.target_item}, {"gmv", r.target_gmv}}.dump() + "\n";
  }
  return out;
}

std::vector<TruthRecord> truth_from_jsonl(const std::string& text) {
  std::vector<TruthRecord> out;
  for_each_line(text, "truth", [&](const json& j) {
    TruthRecord t;
    if (j.contains("request_id")) {
      t.request_id = j.at("request_id").get<int64_t>();
      t.item = j.at("item").get<int64_t>();
      t.gmv = j.at("gmv").get<double>();
    } else {
      t.request_id = j.at("id").get<int64_t>();
      t.item = j.value("target_item", int64_t{-1});
      t.gmv = j.value("target_gmv", 0.0);
    }
    if (t.gmv < 0) throw Error("negative gmv");
    if (t.item >= 0) out.push_back(t);
  });
  return out;
}

std::vector<EvalSample> join_samples(std::span<const Prediction> predictions, std::span<const TruthRecord> truth) {
  std::map<int64_t, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.request_id] = &p;
  std::vector<EvalSample> out;
  for (const auto& t : truth) {
    EvalSample s;
    s.request_id = t.request_id;
    s.truth = t.item;
    s.gmv = t.gmv;
    if (auto it = by_id.find(t.request_id); it != by_id.end()) s.ranked = it->second->items;
    out.push_back(std::move(s));
  }
  return out;
}

std::string world_config_to_json(const WorldConfig& c) {
  json j = {{"seed", c.seed},
            {"catalog_size", c.catalog_size},
            {"embedding_dim", c.embedding_dim},
            {"user_count", c.user_count},
            {"latent_dim", c.latent_dim},
            {"opt_goal_alphabet", c.opt_goal_alphabet},
            {"roi_alphabet", c.roi_alphabet},
            {"industry_alphabet", c.industry_alphabet},
            {"category_skew", c.category_skew},
            {"bid_log_mean", c.bid_log_mean},
            {"bid_log_std", c.bid_log_std},
            {"industry_bid_spread", c.industry_bid_spread},
            {"opt_goal_bid_spread", c.opt_goal_bid_spread},
            {"embedding_noise", c.embedding_noise},
            {"affinity_scale", c.affinity_scale},
            {"affinity_bias", c.affinity_bias},
            {"quality_std", c.quality_std},
            {"bid_affinity_conflict", c.bid_affinity_conflict},
            {"gmv_multiplier", c.gmv_multiplier},
            {"history_length", c.history_length},
            {"targeting_density", c.targeting_density},
            {"segments", c.segments},
            {"geos", c.geos}};
  return j.dump(2);
}

WorldConfig world_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  WorldConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.catalog_size = j.at("catalog_size").get<int>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.user_count = j.at("user_count").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.opt_goal_alphabet = j.at("opt_goal_alphabet").get<int>();
  c.roi_alphabet = j.at("roi_alphabet").get<int>();
  c.industry_alphabet = j.at("industry_alphabet").get<int>();
  c.category_skew = j.at("category_skew").get<double>();
  c.bid_log_mean = j.at("bid_log_mean").get<double>();
  c.bid_log_std = j.at("bid_log_std").get<double>();
  c.industry_bid_spread = j.at("industry_bid_spread").get<double>();
  c.opt_goal_bid_spread = j.at("opt_goal_bid_spread").get<double>();
  c.embedding_noise = j.at("embedding_noise").get<double>();
  c.affinity_scale = j.at("affinity_scale").get<double>();
  c.affinity_bias = j.at("affinity_bias").get<double>();
  c.quality_std = j.at("quality_std").get<double>();
  c.bid_affinity_conflict = j.at("bid_affinity_conflict").get<double>();
  c.gmv_multiplier = j.at("gmv_multiplier").get<double>();
  c.history_length = j.at("history_length").get<int>();
  c.targeting_density = j.at("targeting_density").get<double>();
  c.segments = j.at("segments").get<int>();
  c.geos = j.at("geos").get<int>();
  c.validate();
  return c;
}

}  // namespace univa
