#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "vasa/serialize.hpp"
#include "vasa/style_axis.hpp"

using namespace vasa;

namespace {

std::vector<double> load_labels(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open label file: " + path);
  std::vector<double> labels;
  double v;
  while (in >> v) labels.push_back(v);
  require(!labels.empty(), "label file is empty: " + path);
  return labels;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fit a latent style direction from labeled latent codes"};
  std::string latents_path, labels_path, method_name, out_dir;
  int64_t pairs = 1000;
  int64_t epochs = 500;
  int64_t seed = 1;
  app.add_option("--latents", latents_path, "tensor file of latent rows [N,d]")->required();
  app.add_option("--labels", labels_path, "text file with one style score per line")->required();
  app.add_option("--method", method_name, "pairwise or logistic")->required();
  app.add_option("--out", out_dir, "output directory for the axis")->required();
  app.add_option("--pairs", pairs, "sampled pairs for the pairwise method");
  app.add_option("--epochs", epochs, "epochs for the logistic method");
  app.add_option("--seed", seed, "sampling seed");
  CLI11_PARSE(app, argc, argv);

  try {
    AxisMethod method = axis_method_from_name(method_name);
    LabeledLatentSet set;
    set.latents = load_tensor_file(latents_path);
    set.labels = load_labels(labels_path);
    require(set.latents.rank() == 2, "latents file must hold a [N,d] tensor");
    std::printf("set: %lld latents of dim %lld, %zu labels\n",
                static_cast<long long>(set.latents.dim(0)),
                static_cast<long long>(set.latents.dim(1)), set.labels.size());

    StyleAxis axis = method == AxisMethod::Pairwise
                         ? axis_pairwise(set, pairs, static_cast<uint64_t>(seed))
                         : axis_logistic(set, epochs, static_cast<uint64_t>(seed));
    axis.save(out_dir);
    std::printf("method: %s, sigma_style %.6f\n", axis_method_name(axis.method).c_str(),
                axis.sigma_style);
    std::printf("axis: %s\n", out_dir.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
