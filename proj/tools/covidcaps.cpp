/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// covidcaps: train, pretrain, finetune, eval and predict from the command line.
//
// Exit codes: 0 success, 1 usage, 2 unreadable or malformed file,
// 3 non-finite training loss, 4 any other failure.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "covidcaps.hpp"

namespace {

using covidcaps::ArchitectureConfig;
using covidcaps::LabelScheme;
using Model = covidcaps::ModelGraph<float>;

constexpr std::size_t kReferenceTrainableParams = 295488;

struct TrainFlags {
  std::string manifest;
  std::string out;
  std::string history;
  std::string base;
  std::string arch = "covid-caps";
  std::size_t image_size = 128;
  covidcaps::TrainConfig cfg;
};

struct EvalFlags {
  std::string model;
  std::string manifest;
  std::string image;
  double threshold = 0.5;
  std::string rule = "threshold";
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_arch) {
  cmd->add_option("--manifest", f.manifest, "CSV manifest with path,label columns")
      ->required();
  cmd->add_option("--out", f.out, "Checkpoint path for the best model")->required();
  cmd->add_option("--epochs", f.cfg.epochs, "Training epochs")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--batch", f.cfg.batch_size, "Mini-batch size")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.cfg.lr, "Adam learning rate")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--val-split", f.cfg.val_fraction, "Validation fraction per class")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--seed", f.cfg.seed, "Seed for initialization, split and shuffling")
      ->capture_default_str();
  cmd->add_option("--threshold", f.cfg.threshold,
                  "Positive-capsule threshold for validation metrics")
      ->capture_default_str();
  cmd->add_option("--history", f.history,
                  "JSON-lines history path (default: <out>.history.jsonl)");
  if (with_arch) {
    cmd->add_option("--arch", f.arch, "Architecture preset")
        ->capture_default_str()
        ->check(CLI::IsMember({"covid-caps", "compact"}));
    cmd->add_option("--image-size", f.image_size, "Square input size in pixels")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
  }
}

ArchitectureConfig arch_from_flags(const TrainFlags& f, std::size_t classes) {
  ArchitectureConfig cfg = f.arch == "compact"
                               ? ArchitectureConfig::compact(f.image_size, classes)
                               : ArchitectureConfig::covid_caps(classes);
  if (f.arch != "compact") cfg.input_height = cfg.input_width = f.image_size;
  cfg.seed = f.cfg.seed;
  cfg.loss = f.cfg.loss;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw covidcaps::IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw covidcaps::IoError("failed writing " + path);
}

int run_training(Model& model, const TrainFlags& f, LabelScheme scheme) {
  const auto manifest = covidcaps::load_manifest(f.manifest, scheme);
  const std::string history = f.history.empty() ? f.out + ".history.jsonl" : f.history;
  write_text(history, "");
  std::ofstream hist(history, std::ios::app);
  auto result = covidcaps::train(
      model, manifest, f.cfg,
      [&](const covidcaps::EpochRecord& r, const Model&) {
        hist << covidcaps::to_json(r).dump() << "\n" << std::flush;
        std::cerr << "epoch " << r.epoch << " train_loss " << r.train_loss
                  << " val_accuracy " << r.val_accuracy << "\n";
      });
  covidcaps::save_checkpoint(result.best_model, f.out);
  nlohmann::json summary = {
      {"checkpoint", f.out},
      {"history", history},
      {"best_epoch", result.best_epoch},
      {"epochs", result.history.size()},
      {"trainable_params", result.best_model.count_trainable_params()},
      {"reference_trainable_params", kReferenceTrainableParams},
  };
  const auto& best = result.history.at(result.best_epoch - 1);
  summary["val_accuracy"] = best.val_accuracy;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_train(TrainFlags& f) {
  auto model = covidcaps::build_model<float>(arch_from_flags(f, 2));
  return run_training(model, f, LabelScheme::covid_binary);
}

int cmd_pretrain(TrainFlags& f) {
  auto model = covidcaps::build_model<float>(
      arch_from_flags(f, covidcaps::class_names(LabelScheme::nih_5class).size()));
  return run_training(model, f, LabelScheme::nih_5class);
}

int cmd_finetune(TrainFlags& f) {
  auto model = covidcaps::load_checkpoint<float>(f.base);
  covidcaps::prepare_for_finetune(model);
  return run_training(model, f, LabelScheme::covid_binary);
}

covidcaps::DecisionRule parse_rule(const std::string& rule) {
  return rule == "argmax" ? covidcaps::DecisionRule::argmax
                          : covidcaps::DecisionRule::threshold;
}

int cmd_eval(const EvalFlags& f) {
  auto model = covidcaps::load_checkpoint<float>(f.model);
  if (model.num_classes() != 2) {
    throw covidcaps::ConfigError("eval needs a two-class model, checkpoint has " +
                                 std::to_string(model.num_classes()) + " classes");
  }
  const auto manifest = covidcaps::load_manifest(f.manifest, LabelScheme::covid_binary);
  const auto set = covidcaps::load_images<float>(manifest, model.config());
  const auto ev = covidcaps::evaluate_set(model, set, std::nullopt, 16, f.threshold,
                                          parse_rule(f.rule));
  std::cout << covidcaps::to_json(*ev.metrics).dump(2) << "\n";
  return 0;
}

int cmd_predict(const EvalFlags& f) {
  auto model = covidcaps::load_checkpoint<float>(f.model);
  const auto& arch = model.config();
  auto img = covidcaps::preprocess_image<float>(f.image, arch.input_height, arch.input_width);
  covidcaps::Tensor<float> batch(covidcaps::Shape{1, arch.input_channels, arch.input_height,
                                                  arch.input_width});
  const std::size_t plane = arch.input_height * arch.input_width;
  for (std::size_t c = 0; c < arch.input_channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) batch[c * plane + i] = img[i];
  const auto lengths = model.predict(batch);
  const std::size_t k = model.num_classes();
  LabelScheme scheme = k == 2 ? LabelScheme::covid_binary : LabelScheme::nih_5class;
  std::vector<std::string> names;
  if (k == 2 || k == 5) {
    names = covidcaps::class_names(scheme);
  } else {
    for (std::size_t j = 0; j < k; ++j) names.push_back("class" + std::to_string(j));
  }
  nlohmann::json out;
  out["lengths"] = nlohmann::json::array();
  for (std::size_t j = 0; j < k; ++j) out["lengths"].push_back(lengths[j]);
  out["classes"] = names;
  std::string decision;
  if (k == 2 && f.rule == "threshold") {
    decision = lengths[1] >= f.threshold ? names[1] : names[0];
    out["threshold"] = f.threshold;
  } else {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (lengths[j] > lengths[arg]) arg = j;
    decision = names[arg];
  }
  out["decision"] = decision;
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule-network chest X-ray classifier"};
  app.require_subcommand(1);

  TrainFlags train_f, pre_f, fine_f;
  EvalFlags eval_f, pred_f;

  auto* train = app.add_subcommand("train", "Train a two-class model from scratch");
  add_train_flags(train, train_f, true);

  auto* pretrain = app.add_subcommand("pretrain", "Train a five-class model on NIH labels");
  add_train_flags(pretrain, pre_f, true);

  auto* finetune = app.add_subcommand(
      "finetune", "Replace the head of a pretrained model, freeze convolutions, train");
  add_train_flags(finetune, fine_f, false);
  finetune->add_option("--base", fine_f.base, "Pretrained checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "Print metrics JSON for a labeled manifest");
  eval->add_option("--model", eval_f.model, "Checkpoint")->required();
  eval->add_option("--manifest", eval_f.manifest, "CSV manifest")->required();
  eval->add_option("--threshold", eval_f.threshold, "Positive-capsule threshold")
      ->capture_default_str();
  eval->add_option("--rule", eval_f.rule, "Decision rule")
      ->capture_default_str()
      ->check(CLI::IsMember({"threshold", "argmax"}));

  auto* predict = app.add_subcommand("predict", "Print class lengths for one image");
  predict->add_option("--model", pred_f.model, "Checkpoint")->required();
  predict->add_option("--image", pred_f.image, "PNG or JPEG image")->required();
  predict->add_option("--threshold", pred_f.threshold, "Positive-capsule threshold")
      ->capture_default_str();
  predict->add_option("--rule", pred_f.rule, "Decision rule")
      ->capture_default_str()
      ->check(CLI::IsMember({"threshold", "argmax"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands()[0];
    std::cerr << sub->help();
    return 1;
  }

  try {
    if (*train) return cmd_train(train_f);
    if (*pretrain) return cmd_pretrain(pre_f);
    if (*finetune) return cmd_finetune(fine_f);
    if (*eval) return cmd_eval(eval_f);
    if (*predict) return cmd_predict(pred_f);
  } catch (const covidcaps::NonFiniteLossError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const covidcaps::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const covidcaps::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 1;
}
