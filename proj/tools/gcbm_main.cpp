// gcbm: command-line front end for datasets, training, evaluation,
// intervention, post-hoc analysis and the HTTP service.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "gcbm/analysis.hpp"
#include "gcbm/data_io.hpp"
#include "gcbm/error.hpp"
#include "gcbm/intervention.hpp"
#include "gcbm/model.hpp"
#include "gcbm/service.hpp"
#include "gcbm/training.hpp"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw gcbm::FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw gcbm::FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw gcbm::FormatError("write failed: " + path.string());
}

// Named split if present, else the whole dataset.
gcbm::EmbeddingDataset pick(const gcbm::EmbeddingDataset& data, const std::string& split) {
  if (split.empty() || split == "all") return data;
  return data.split(split);
}

std::vector<std::string> names_or_default(const gcbm::EmbeddingDataset* data, std::size_t k) {
  if (data) return data->concept_names;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back("c" + std::to_string(i));
  return names;
}

json metrics_json(const gcbm::Metrics& m) {
  json j{{"label_accuracy", m.label_accuracy}, {"samples", m.samples}, {"skipped_concepts", m.skipped_concepts}};
  j["concept_roc_auc"] = m.concept_roc_auc ? json(*m.concept_roc_auc) : json(nullptr);
  return j;
}

std::string edges_json(const gcbm::EdgeSet& edges, const std::vector<std::string>& names) {
  json nodes = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) nodes.push_back({{"id", i}, {"name", names[i]}});
  json arr = json::array();
  for (const auto& e : edges) {
    arr.push_back({{"source", e.source}, {"target", e.target}, {"weight", e.weight}, {"layer", e.layer}});
  }
  return json{{"nodes", nodes}, {"edges", arr}}.dump(2) + "\n";
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_csv(s)) {
    std::size_t pos = 0;
    double v = std::stod(item, &pos);
    if (pos != item.size()) throw gcbm::ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw gcbm::ConfigError("empty number list");
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_csv(s)) {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(item, &pos);
    if (pos != item.size()) throw gcbm::ConfigError("not a seed: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw gcbm::ConfigError("empty seed list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph concept bottleneck models"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a planted-graph synthetic dataset");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec, "SyntheticSpec JSON file")->required()->check(CLI::ExistingFile);
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--out", synth_out, "Output dataset directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "TrainConfig JSON file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", train_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", train_out, "Output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_model, eval_data, eval_split = "test", eval_acts;
  eval->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", eval_split, "Split name, or 'all'");
  eval->add_option("--activations", eval_acts, "Also write c_tilde rows plus labels here");

  // intervene
  auto* intervene = app.add_subcommand("intervene", "Intervention accuracy curve");
  std::string iv_model, iv_data, iv_policy = "ucp", iv_ratios = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
  std::string iv_split = "test", iv_proto_split;
  std::uint64_t iv_seed = 0;
  double iv_gamma = gcbm::kDefaultInterventionGamma;
  intervene->add_option("--model", iv_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  intervene->add_option("--data", iv_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  intervene->add_option("--policy", iv_policy, "ucp|random");
  intervene->add_option("--ratios", iv_ratios, "Comma-separated ratios in [0,1]");
  intervene->add_option("--split", iv_split, "Evaluation split, or 'all'");
  intervene->add_option("--prototype-split", iv_proto_split, "Split for label-free prototypes (default: evaluation split)");
  intervene->add_option("--seed", iv_seed, "Seed for the random policy");
  intervene->add_option("--gamma", iv_gamma, "Supervised set-value magnitude");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Post-hoc analyses");
  analyze->require_subcommand(1);

  auto* salient = analyze->add_subcommand("salient", "Greedy salient-subgraph pruning");
  std::string sal_model, sal_data, sal_split = "val", sal_order = "descending", sal_out;
  salient->add_option("--model", sal_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  salient->add_option("--data", sal_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  salient->add_option("--split", sal_split, "Split used for the accuracy check");
  salient->add_option("--order", sal_order, "descending|ascending edge weight");
  salient->add_option("--out", sal_out, "Write the pruned checkpoint here");

  auto* attack = analyze->add_subcommand("attack", "Concept mask / perturb attack");
  std::string at_model, at_data, at_split = "test", at_group = "random", at_mode = "mask";
  gcbm::AttackConfig at_cfg;
  attack->add_option("--model", at_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  attack->add_option("--data", at_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  attack->add_option("--split", at_split, "Evaluation split, or 'all'");
  attack->add_option("--group", at_group, "connected|isolated|random");
  attack->add_option("--mode", at_mode, "mask|perturb");
  attack->add_option("--n", at_cfg.n, "Concepts attacked per trial");
  attack->add_option("--trials", at_cfg.trials, "Trials");
  attack->add_option("--seed", at_cfg.seed, "Seed");
  attack->add_option("--sigma", at_cfg.noise_sigma, "Perturbation std-dev");

  auto* sweep = analyze->add_subcommand("sweep", "Beta sweep");
  std::string sw_config, sw_data, sw_betas = "0,0.05,0.5,5", sw_seeds = "0,1,2,3,4", sw_split = "test", sw_out;
  sweep->add_option("--config", sw_config, "Base TrainConfig JSON file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--data", sw_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--betas", sw_betas, "Comma-separated betas");
  sweep->add_option("--seeds", sw_seeds, "Comma-separated seeds");
  sweep->add_option("--split", sw_split, "Evaluation split");
  sweep->add_option("--out", sw_out, "Write the JSON report here");

  auto* exportg = analyze->add_subcommand("export", "Export the graph or activations");
  std::string ex_model, ex_data, ex_format = "json", ex_out, ex_acts, ex_split = "all";
  exportg->add_option("--model", ex_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  exportg->add_option("--data", ex_data, "Dataset directory (concept names, activations)")->check(CLI::ExistingDirectory);
  exportg->add_option("--format", ex_format, "json|dot");
  exportg->add_option("--out", ex_out, "Graph output file");
  exportg->add_option("--activations", ex_acts, "Activation matrix output file (needs --data)");
  exportg->add_option("--split", ex_split, "Split for --activations, or 'all'");

  auto* recovery = analyze->add_subcommand("recovery", "Score learned edges against a reference graph");
  std::string rc_model, rc_graph;
  recovery->add_option("--model", rc_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  recovery->add_option("--graph", rc_graph, "Reference graph JSON")->required()->check(CLI::ExistingFile);

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  std::string sv_model, sv_data, sv_host = "127.0.0.1";
  int sv_port = 8080;
  serve->add_option("--model", sv_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  serve->add_option("--data", sv_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--port", sv_port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", sv_host, "Bind address");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      auto spec = gcbm::synthetic_spec_from_json(read_text(synth_spec));
      auto syn = gcbm::generate_synthetic(spec, synth_seed);
      gcbm::save_dataset(synth_out, syn.data);
      write_text(fs::path(synth_out) / "planted.json", edges_json(syn.planted, syn.data.concept_names));
      std::cout << json{{"out", synth_out}, {"seed_used", syn.seed_used},
                        {"samples", syn.data.size()}, {"planted_edges", syn.planted.size()}}
                       .dump()
                << "\n";
    } else if (*train) {
      auto cfg = gcbm::train_config_from_json(read_text(train_config));
      auto data = gcbm::load_dataset(train_data);
      auto result = gcbm::train(cfg, data, fs::path(train_out));
      const auto& last = result.history.epochs.back();
      std::cout << json{{"best_epoch", result.best_epoch},
                        {"best_val_accuracy", result.history.epochs[result.best_epoch].val_accuracy},
                        {"final_train_accuracy", last.train_accuracy},
                        {"final_edges", last.edge_count}}
                       .dump()
                << "\n";
    } else if (*eval) {
      auto model = gcbm::load_checkpoint(eval_model);
      auto data = pick(gcbm::load_dataset(eval_data), eval_split);
      std::cout << metrics_json(gcbm::evaluate(model, data)).dump() << "\n";
      if (!eval_acts.empty()) gcbm::export_activations(model, data, eval_acts);
    } else if (*intervene) {
      auto model = gcbm::load_checkpoint(iv_model);
      auto full = gcbm::load_dataset(iv_data);
      auto data = pick(full, iv_split);
      gcbm::CurveConfig cc;
      cc.policy = gcbm::policy_from_string(iv_policy);
      cc.gamma = iv_gamma;
      cc.seed = iv_seed;
      auto ratios = parse_doubles(iv_ratios);
      std::optional<gcbm::EmbeddingDataset> protos;
      if (!iv_proto_split.empty()) protos = pick(full, iv_proto_split);
      auto curve = gcbm::intervention_curve(model, data, ratios, cc, protos ? &*protos : nullptr);
      std::printf("%-8s %s\n", "ratio", "accuracy");
      for (const auto& p : curve) std::printf("%-8.3f %.6f\n", p.ratio, p.accuracy);
    } else if (*salient) {
      auto model = gcbm::load_checkpoint(sal_model);
      auto val = pick(gcbm::load_dataset(sal_data), sal_split);
      gcbm::EdgeOrder order;
      if (sal_order == "descending") {
        order = gcbm::EdgeOrder::descending_weight;
      } else if (sal_order == "ascending") {
        order = gcbm::EdgeOrder::ascending_weight;
      } else {
        throw gcbm::ConfigError("unknown edge order '" + sal_order + "'");
      }
      auto r = gcbm::salient_subgraph(model, val, order);
      json j{{"edges_before", r.kept.size() + r.removed.size()},
             {"edges_after", r.kept.size()},
             {"accuracy_before", r.accuracy_before},
             {"accuracy_after", r.accuracy_after}};
      j["auc_before"] = r.auc_before ? json(*r.auc_before) : json(nullptr);
      j["auc_after"] = r.auc_after ? json(*r.auc_after) : json(nullptr);
      std::cout << j.dump() << "\n";
      if (!sal_out.empty()) gcbm::save_checkpoint(sal_out, r.pruned);
    } else if (*attack) {
      auto model = gcbm::load_checkpoint(at_model);
      auto data = pick(gcbm::load_dataset(at_data), at_split);
      at_cfg.group = gcbm::attack_group_from_string(at_group);
      at_cfg.mode = gcbm::attack_mode_from_string(at_mode);
      auto r = gcbm::attack_eval(model, data, at_cfg);
      std::cout << json{{"group", gcbm::to_string(r.group)},
                        {"mode", gcbm::to_string(r.mode)},
                        {"n_attacked", r.n_attacked},
                        {"group_size", r.group_size},
                        {"baseline_accuracy", r.baseline_accuracy},
                        {"accuracies", r.accuracies},
                        {"mean", r.mean},
                        {"std", r.std}}
                       .dump()
                << "\n";
    } else if (*sweep) {
      auto cfg = gcbm::train_config_from_json(read_text(sw_config));
      auto data = gcbm::load_dataset(sw_data);
      auto betas = parse_doubles(sw_betas);
      auto seeds = parse_seeds(sw_seeds);
      auto report = gcbm::beta_sweep(cfg, betas, data, seeds, sw_split);
      std::printf("%-10s %-22s %s\n", "beta", "accuracy", "edges");
      for (const auto& row : report.rows) {
        std::printf("%-10g %.4f +- %-12.4f %.2f +- %.2f\n", row.beta, row.accuracy_mean, row.accuracy_std,
                    row.edges_mean, row.edges_std);
      }
      if (!sw_out.empty()) write_text(sw_out, report.to_json());
    } else if (*exportg) {
      auto model = gcbm::load_checkpoint(ex_model);
      std::optional<gcbm::EmbeddingDataset> data;
      if (!ex_data.empty()) data = gcbm::load_dataset(ex_data);
      if (ex_out.empty() && ex_acts.empty()) throw gcbm::ConfigError("export needs --out and/or --activations");
      if (!ex_out.empty()) {
        auto names = names_or_default(data ? &*data : nullptr, model.config().concepts);
        gcbm::export_graph(model, names, ex_out, gcbm::graph_format_from_string(ex_format));
      }
      if (!ex_acts.empty()) {
        if (!data) throw gcbm::ConfigError("--activations needs --data");
        gcbm::export_activations(model, pick(*data, ex_split), ex_acts);
      }
    } else if (*recovery) {
      auto model = gcbm::load_checkpoint(rc_model);
      auto reference = gcbm::import_graph_json(read_text(rc_graph));
      auto m = gcbm::graph_recovery_metrics(gcbm::extract_edges(model.graph()), reference.edges,
                                            model.config().concepts);
      std::cout << json{{"precision", m.precision},
                        {"recall", m.recall},
                        {"f1", m.f1},
                        {"random_baseline_f1", m.random_baseline_f1},
                        {"learned_edges", m.learned_edges},
                        {"reference_edges", m.planted_edges}}
                       .dump()
                << "\n";
    } else if (*serve) {
      gcbm::Service service;
      service.load(gcbm::load_checkpoint(sv_model), gcbm::load_dataset(sv_data));
      std::cerr << "listening on " << sv_host << ":" << sv_port << "\n";
      if (!service.listen(sv_host, sv_port)) {
        std::cerr << "error: cannot bind " << sv_host << ":" << sv_port << "\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
