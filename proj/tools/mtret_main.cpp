// mtret: multi-objective sequential retriever.
//
// One binary, subcommand style: gen-data, train, build-index, serve, query,
// eval, bench. Every command exits 0 on success and prints a one-line
// `error: ...` to stderr otherwise.

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mtret/batches.hpp"
#include "mtret/evaluate.hpp"
#include "mtret/index.hpp"
#include "mtret/io.hpp"
#include "mtret/metrics.hpp"
#include "mtret/serve.hpp"
#include "mtret/trainer.hpp"
#include "mtret/world.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

mtret::RunConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& overrides) {
  if (config_path.empty()) return mtret::default_run_config(overrides);
  return mtret::load_run_config(config_path, overrides);
}

// Dataset-anchored config: the dataset's own config is the base, an optional
// file is merged over it, then key=value overrides. The world section must
// stay identical to the dataset's (the vocabularies are baked into it).
mtret::RunConfig resolve_config_over(const mtret::RunConfig& base,
                                     const std::string& config_path,
                                     const std::vector<std::string>& overrides) {
  json merged = mtret::to_json(base);
  if (!config_path.empty()) {
    json file = json::parse(mtret::read_text_file(config_path));
    merged.merge_patch(file);
  }
  std::vector<std::string> all;
  for (const auto& o : overrides) all.push_back(o);
  mtret::RunConfig cfg = mtret::run_config_from_json(merged);
  // Re-apply overrides through the loader so dotted paths work uniformly.
  if (!all.empty()) {
    json j = mtret::to_json(cfg);
    for (const auto& o : all) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("override '" + o + "' must be key=value");
      }
      json* cursor = &j;
      std::string path = o.substr(0, eq);
      std::size_t start = 0;
      std::vector<std::string> parts;
      while (true) {
        const auto dot = path.find('.', start);
        if (dot == std::string::npos) {
          parts.push_back(path.substr(start));
          break;
        }
        parts.push_back(path.substr(start, dot - start));
        start = dot + 1;
      }
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) cursor = &(*cursor)[parts[i]];
      json value = json::parse(o.substr(eq + 1), nullptr, false);
      (*cursor)[parts.back()] = value.is_discarded() ? json(o.substr(eq + 1)) : value;
    }
    cfg = mtret::run_config_from_json(j);
  }
  cfg.validate();
  if (mtret::to_json(cfg).at("world") != mtret::to_json(base).at("world")) {
    throw std::invalid_argument(
        "config.world differs from the dataset's world; regenerate the "
        "dataset instead of overriding world fields");
  }
  return cfg;
}

int cmd_gen_data(const std::string& config_path,
                 const std::vector<std::string>& overrides,
                 const std::string& out_dir, bool force) {
  mtret::RunConfig cfg = resolve_config(config_path, overrides);
  mtret::Dataset ds = mtret::build_dataset(cfg);
  mtret::write_dataset(ds, out_dir, force);
  std::array<std::int64_t, mtret::kNumObjectives> counts{};
  for (const auto& ex : ds.examples) {
    for (int c = 0; c < mtret::kNumObjectives; ++c) {
      counts[static_cast<std::size_t>(c)] += ex.labels[static_cast<std::size_t>(c)];
    }
  }
  std::cout << "wrote " << ds.examples.size() << " events to " << out_dir;
  for (int c = 0; c < mtret::kNumObjectives; ++c) {
    std::cout << " " << mtret::kObjectiveNames[c] << "="
              << static_cast<double>(counts[static_cast<std::size_t>(c)]) /
                     static_cast<double>(ds.examples.size());
  }
  std::cout << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_prefix,
              const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& resume_prefix, bool run_grad_check) {
  mtret::Dataset ds = mtret::read_dataset(data_dir);
  mtret::ParamStore store;
  std::int64_t start_step = 0;
  mtret::RunConfig cfg;
  if (!resume_prefix.empty()) {
    mtret::ParamStore::Loaded loaded = store.load_checkpoint(resume_prefix);
    cfg = resolve_config_over(loaded.config, config_path, overrides);
    start_step = loaded.step;
  } else {
    cfg = resolve_config_over(ds.config, config_path, overrides);
    mtret::register_model_params(store, cfg, cfg.seed);
  }

  if (run_grad_check) {
    mtret::GradCheckReport report =
        mtret::grad_check_model(cfg, ds, store, /*batch_size=*/4,
                                /*h=*/1e-5, /*tol=*/1e-4);
    std::cout << "grad-check max relative error " << report.max_rel_err
              << " over " << report.entries.size() << " tensors (tol "
              << report.tol << ")\n";
    for (const auto& e : report.entries) {
      if (e.max_rel_err > report.tol) {
        std::cout << "  FAIL " << e.name << " rel_err " << e.max_rel_err
                  << " analytic " << e.analytic_at_worst << " numeric "
                  << e.numeric_at_worst << "\n";
      }
    }
    return report.pass() ? 0 : 2;
  }

  mtret::TrainOutcome outcome =
      mtret::train_model(cfg, ds, store, start_step, out_prefix + ".log.jsonl");
  store.save_checkpoint(out_prefix, cfg, outcome.final_step);
  std::cout << "trained to step " << outcome.final_step << ", checkpoint at "
            << out_prefix << ".json/.bin\n";
  return 0;
}

int cmd_build_index(const std::string& checkpoint_prefix,
                    const std::string& data_dir, const std::string& out_dir) {
  mtret::ParamStore store;
  mtret::ParamStore::Loaded loaded = store.load_checkpoint(checkpoint_prefix);
  mtret::Dataset ds = mtret::read_dataset(data_dir);
  mtret::DatasetSplit split =
      mtret::split_by_time(ds.examples, loaded.config.train.holdout_fraction);
  mtret::IndexBuild build = mtret::build_indices(
      loaded.config, store, ds.items, split.train,
      mtret::checkpoint_hash(checkpoint_prefix));
  mtret::save_index_build(build, out_dir, loaded.config);
  std::cout << "built " << build.indices.size() << " indices in " << out_dir;
  for (const auto& index : build.indices) {
    std::cout << " " << mtret::objective_name(index.objective()) << "="
              << index.size();
  }
  std::cout << "\n";
  for (int k : build.empty_objectives) {
    std::cerr << "warning: objective " << mtret::objective_name(k)
              << " has no positive items; its index is empty\n";
  }
  return 0;
}

int cmd_serve(const std::string& checkpoint_prefix, const std::string& index_dir,
              std::int64_t port, bool stdio) {
  mtret::ServingState state = mtret::ServingState::load(index_dir, checkpoint_prefix);
  if (stdio) {
    mtret::serve_stdio(state, std::cin, std::cout);
    return 0;
  }
  const int p = port > 0 ? static_cast<int>(port)
                         : static_cast<int>(state.config().serve.port);
  mtret::serve_tcp(state, p);
  return 0;
}

int cmd_query(const std::string& checkpoint_prefix, const std::string& index_dir,
              std::string request, const std::string& request_file) {
  mtret::ServingState state = mtret::ServingState::load(index_dir, checkpoint_prefix);
  if (!request_file.empty()) request = mtret::read_text_file(request_file);
  if (request.empty()) {
    if (!std::getline(std::cin, request)) {
      throw std::runtime_error("no request given (use --request, --request-file "
                               "or pipe a line on stdin)");
    }
  }
  // Strip a trailing newline so files work as-is.
  while (!request.empty() && (request.back() == '\n' || request.back() == '\r')) {
    request.pop_back();
  }
  const std::string response = mtret::handle_request_line(state, request);
  std::cout << response << "\n";
  json parsed = json::parse(response);
  return parsed.contains("error") ? 1 : 0;
}

int cmd_eval(const std::string& checkpoint_prefix, const std::string& data_dir,
             const std::string& universe, const std::string& index_dir,
             const std::string& out_path, const std::string& histogram_path) {
  mtret::ParamStore store;
  mtret::ParamStore::Loaded loaded = store.load_checkpoint(checkpoint_prefix);
  mtret::Dataset ds = mtret::read_dataset(data_dir);
  mtret::IndexBuild build;
  const mtret::IndexBuild* build_ptr = nullptr;
  if (universe == "index") {
    if (index_dir.empty()) {
      throw std::runtime_error("--universe index requires --index");
    }
    build = mtret::load_index_build(index_dir, loaded.config.model.n_objectives);
    build_ptr = &build;
  }
  mtret::EvalReport report =
      mtret::evaluate(loaded.config, store, ds, universe, build_ptr);
  if (!out_path.empty()) {
    mtret::write_report(report, loaded.config, out_path);
  }
  if (!histogram_path.empty()) {
    mtret::write_histogram_csv(report.probe, histogram_path);
  }
  for (std::size_t k = 0; k < report.per_objective.size(); ++k) {
    const auto& agg = report.per_objective[k];
    std::cout << mtret::objective_name(static_cast<int>(k));
    for (std::size_t c = 0; c < mtret::kRecallCutoffs.size(); ++c) {
      std::cout << " recall@" << mtret::kRecallCutoffs[c] << "=" << agg.recall[c];
    }
    for (std::size_t c = 0; c < mtret::kNdcgCutoffs.size(); ++c) {
      std::cout << " ndcg@" << mtret::kNdcgCutoffs[c] << "=" << agg.ndcg[c];
    }
    std::cout << " users=" << agg.users_evaluated << "\n";
  }
  std::cout << "probe cosine mean=" << report.probe.mean
            << " std=" << report.probe.stddev << "\n";
  return 0;
}

int cmd_bench(std::int64_t n, std::int64_t d, std::int64_t k,
              std::int64_t layers) {
  mtret::CostModelInput input{n, d, k, layers};
  const std::uint64_t independent =
      mtret::qkv_cost(input, mtret::QkvMode::kIndependent);
  const std::uint64_t shared = mtret::qkv_cost(input, mtret::QkvMode::kShared);
  std::cout << "independent " << independent << "\n";
  std::cout << "shared " << shared << "\n";
  std::cout << "ratio "
            << static_cast<double>(independent) / static_cast<double>(shared)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-objective sequential retriever"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, out_prefix, resume_prefix;
  std::string checkpoint_prefix, index_dir, request, request_file;
  std::string universe = "full", out_path, histogram_path;
  std::vector<std::string> overrides;
  bool force = false, stdio = false, run_grad_check = false;
  std::int64_t port = 0, bench_n = 64, bench_d = 32, bench_k = 3,
               bench_layers = 1;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--set", overrides, "override config fields (key.path=value)");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite existing dataset files");

  auto* train = app.add_subcommand("train", "train the twin towers");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_prefix, "checkpoint prefix")->required();
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--set", overrides, "override config fields");
  train->add_option("--resume", resume_prefix, "checkpoint prefix to resume");
  train->add_flag("--grad-check", run_grad_check,
                  "run the finite-difference gradient suite and exit");

  auto* build = app.add_subcommand("build-index", "build per-objective indices");
  build->add_option("--checkpoint", checkpoint_prefix, "checkpoint prefix")
      ->required();
  build->add_option("--data", data_dir, "dataset directory")->required();
  build->add_option("--out", out_dir, "index directory")->required();

  auto* serve = app.add_subcommand("serve", "serve retrieval requests");
  serve->add_option("--checkpoint", checkpoint_prefix, "checkpoint prefix")
      ->required();
  serve->add_option("--index", index_dir, "index directory")->required();
  serve->add_option("--port", port, "TCP port (default from config)");
  serve->add_flag("--stdio", stdio, "serve line requests on stdin/stdout");

  auto* query = app.add_subcommand("query", "answer one retrieval request");
  query->add_option("--checkpoint", checkpoint_prefix, "checkpoint prefix")
      ->required();
  query->add_option("--index", index_dir, "index directory")->required();
  query->add_option("--request", request, "request JSON (one line)");
  query->add_option("--request-file", request_file, "file with the request");

  auto* eval = app.add_subcommand("eval", "offline metrics over the holdout");
  eval->add_option("--checkpoint", checkpoint_prefix, "checkpoint prefix")
      ->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--universe", universe, "full | index");
  eval->add_option("--index", index_dir, "index directory (universe=index)");
  eval->add_option("--out", out_path, "report file");
  eval->add_option("--histogram", histogram_path, "similarity histogram CSV");

  auto* bench = app.add_subcommand("bench", "attention cost model");
  bench->add_option("--n", bench_n, "behavior sequence length");
  bench->add_option("--d", bench_d, "embedding width");
  bench->add_option("--k", bench_k, "objective count");
  bench->add_option("--layers", bench_layers, "layer multiplier");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, overrides, out_dir, force);
    if (train->parsed()) {
      return cmd_train(data_dir, out_prefix, config_path, overrides,
                       resume_prefix, run_grad_check);
    }
    if (build->parsed()) {
      return cmd_build_index(checkpoint_prefix, data_dir, out_dir);
    }
    if (serve->parsed()) {
      return cmd_serve(checkpoint_prefix, index_dir, port, stdio);
    }
    if (query->parsed()) {
      return cmd_query(checkpoint_prefix, index_dir, request, request_file);
    }
    if (eval->parsed()) {
      return cmd_eval(checkpoint_prefix, data_dir, universe, index_dir,
                      out_path, histogram_path);
    }
    if (bench->parsed()) return cmd_bench(bench_n, bench_d, bench_k, bench_layers);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
