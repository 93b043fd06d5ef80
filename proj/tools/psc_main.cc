// Copyright 2026 The PSC Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// psc: train-toy | measure-collapse | fit | predict | evaluate | all
// Exit codes: 0 success, 2 invalid input, 3 numerical failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "psc/common.h"
#include "psc/workflow.h"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint32_t> layer;
  std::string dims;
  std::string head;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string train, val, test, ood, ambiguous;
};

void add_common(CLI::App* sub, Flags& flags) {
  sub->add_option("--config", flags.config, "JSON run config");
  sub->add_option("--layer", flags.layer, "force the candidate layer id");
  sub->add_option("--dims", flags.dims, "projection dims CxD or auto");
  sub->add_option("--head", flags.head, "gda, laplace or both");
  sub->add_option("--seed", flags.seed, "base seed");
  sub->add_option("--out", flags.out, "output directory");
  sub->add_option("--train", flags.train, "train manifest");
  sub->add_option("--val", flags.val, "val manifest");
  sub->add_option("--test", flags.test, "test manifest");
  sub->add_option("--ood", flags.ood, "OOD manifest");
  sub->add_option("--ambiguous", flags.ambiguous, "ambiguous iD manifest");
}

psc::RunConfig resolve(const Flags& flags) {
  psc::RunConfig config =
      flags.config.empty() ? psc::RunConfig{} : psc::load_run_config(flags.config);
  if (flags.layer) config.layer = flags.layer;
  if (!flags.dims.empty()) config.dims = psc::parse_dims(flags.dims);
  if (!flags.head.empty()) config.head = psc::head_from_string(flags.head);
  if (flags.seed) {
    config.seed = *flags.seed;
    if (config.toy) {
      config.toy->dataset.seed = *flags.seed;
      config.toy->training.seed = *flags.seed;
    }
  }
  if (!flags.out.empty()) config.out = flags.out;
  if (!flags.train.empty()) config.train = flags.train;
  if (!flags.val.empty()) config.val = flags.val;
  if (!flags.test.empty()) config.test = flags.test;
  if (!flags.ood.empty()) config.ood = flags.ood;
  if (!flags.ambiguous.empty()) config.ambiguous = flags.ambiguous;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic skip connections over stored activations"};
  app.require_subcommand(1);
  Flags flags;
  const char* names[] = {"train-toy", "measure-collapse", "fit",
                         "predict",   "evaluate",         "all"};
  for (const char* name : names) add_common(app.add_subcommand(name), flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  psc::set_warning_handler([](std::string_view message) {
    std::cerr << "psc: note: " << message << '\n';
  });
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const psc::RunConfig config = resolve(flags);
    psc::OutputLock lock(config.out);
    if (command == "train-toy") {
      psc::cmd_train_toy(config);
    } else if (command == "measure-collapse") {
      psc::cmd_measure_collapse(config);
    } else if (command == "fit") {
      psc::cmd_fit(config);
    } else if (command == "predict") {
      psc::cmd_predict(config);
    } else if (command == "evaluate") {
      psc::cmd_evaluate(config);
    } else {
      psc::cmd_all(config);
    }
  } catch (const psc::ValidationError& e) {
    std::cerr << "psc " << command << ": " << e.what() << '\n';
    return 2;
  } catch (const psc::ComputeError& e) {
    std::cerr << "psc " << command << ": " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "psc " << command << ": " << e.what() << '\n';
    return 3;
  }
  return 0;
}
