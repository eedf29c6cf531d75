// Writes a small labelled scene (cube, labels, sidecar) and a ready-to-run
// config next to it. Optionally also the headerless raw arrays that
// `msrn convert` ingests.

#include <iostream>

#include "CLI11.hpp"
#include "msrn/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic hyperspectral scene", "msrn_synth"};
  std::string out_dir;
  msrn::SyntheticSpec spec;
  std::size_t max_epochs = 30;
  bool raw = false;
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--seed", spec.seed, "noise seed");
  app.add_option("--height", spec.height);
  app.add_option("--width", spec.width);
  app.add_option("--bands", spec.bands);
  app.add_option("--classes", spec.classes);
  app.add_option("--noise", spec.noise_std, "white-noise standard deviation");
  app.add_option("--max-epochs", max_epochs, "max_epochs written into config.json");
  app.add_flag("--raw", raw, "also write scene.bsq (float32) and scene.u16 raw arrays");
  CLI11_PARSE(app, argc, argv);

  try {
    const std::filesystem::path dir(out_dir);
    const msrn::SyntheticScene scene = msrn::make_synthetic_scene(spec);
    msrn::save_cube(dir / "scene.hsic", scene.cube);
    msrn::save_labels(dir / "scene.hsil", scene.labels);
    msrn::save_class_info(dir / "classes.json", scene.info);
    if (raw) {
      msrn::io::ByteWriter cube, labels;
      for (std::size_t b = 0; b < spec.bands; ++b)
        for (std::size_t p = 0; p < scene.cube.pixels(); ++p) cube.f32(static_cast<float>(scene.cube.values[p * spec.bands + b]));
      for (auto l : scene.labels.labels) labels.u16(l);
      msrn::io::write_file(dir / "scene.bsq", cube.str());
      msrn::io::write_file(dir / "scene.u16", labels.str());
    }
    msrn::io::write_json(dir / "config.json",
                         {{"data", {{"cube", "scene.hsic"}, {"labels", "scene.hsil"}, {"sidecar", "classes.json"}}},
                          {"training", {{"max_epochs", max_epochs}, {"seed", spec.seed}}},
                          {"output_dir", "run"}});
    std::cout << "wrote " << spec.height << "x" << spec.width << "x" << spec.bands << " scene with " << spec.classes
              << " classes to " << dir.string() << "\n";
  } catch (const msrn::Error& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
