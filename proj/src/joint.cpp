// SPDX-License-Identifier: Apache-2.0

#include "dctvae/joint.hpp"

namespace dctvae {

double pixel_max_for(Likelihood l) { return l == Likelihood::kBernoulli ? 1.0 : 255.0; }

std::optional<ContextCodec> make_codec(const ModelConfig& cfg, const Tensor<double>& train_pixels) {
  const double pmax = pixel_max_for(cfg.likelihood);
  switch (cfg.context) {
    case ContextKind::kNone: return std::nullopt;
    case ContextKind::kDownsample:
      return ContextCodec::downsample(cfg.image_channels, cfg.image_side, cfg.context_window, pmax);
    case ContextKind::kDct: {
      if (train_pixels.rank() != 4 || train_pixels.dim(0) < 1)
        throw std::invalid_argument("make_codec: need at least one training image to fit the normalization");
      NormalizationFit fit(cfg.image_channels, cfg.image_side, cfg.context_side);
      const Shape item{cfg.image_channels, cfg.image_side, cfg.image_side};
      const std::size_t per = shape_size(item);
      for (int n = 0; n < train_pixels.dim(0); ++n) {
        std::vector<double> v(train_pixels.data() + n * per, train_pixels.data() + (n + 1) * per);
        fit.add(Tensor<double>(item, std::move(v)));
      }
      return ContextCodec::dct(cfg.image_channels, cfg.image_side, cfg.context_side, pmax, fit.result());
    }
  }
  return std::nullopt;
}

template <class T>
JointModel<T>::JointModel(RunConfig cfg, std::optional<ContextCodec> codec, std::uint64_t init_seed)
    : cfg_(std::move(cfg)), store_(std::make_unique<ParameterStore<T>>()), codec_(std::move(codec)) {
  cfg_.model.validate();
  if (cfg_.model.has_context() != codec_.has_value())
    throw std::invalid_argument("JointModel: codec presence does not match the model's context setting");
  if (codec_) {
    codec_->validate();
    if (!codec_->fitted()) throw std::invalid_argument("JointModel: context codec is not fitted");
    if (codec_->channels != cfg_.model.image_channels || codec_->side != cfg_.model.image_side)
      throw std::invalid_argument("JointModel: codec dimensions do not match the image");
  }
  Rng rng(init_seed);
  vae_ = std::make_unique<Hvae<T>>(cfg_.model, *store_, rng);
  if (codec_) {
    cfg_.diffusion.validate();
    prior_ = std::make_unique<Denoiser<T>>(cfg_.diffusion, codec_->channels, *store_, rng);
    schedule_ = build_schedule(cfg_.diffusion.steps, cfg_.diffusion.start(), cfg_.diffusion.end());
    grid_ = BinGrid{bin_halfwidth(*codec_), grid_edge(*codec_)};
  }
}

template <class T>
Tensor<T> context_images(const JointModel<T>& model, const std::vector<ContextCode>& codes) {
  const auto& m = model.model_config();
  const Shape item{m.image_channels, m.image_side, m.image_side};
  const std::size_t per = shape_size(item);
  Tensor<double> pix({static_cast<int>(codes.size()), m.image_channels, m.image_side, m.image_side});
  for (std::size_t n = 0; n < codes.size(); ++n) {
    const auto img = decode(codes[n], *model.codec());
    std::copy_n(img.data(), per, pix.data() + n * per);
  }
  return Hvae<T>::context_input(pix, model.pixel_max());
}

template <class T>
Batch<T> make_batch(const JointModel<T>& model, Tensor<double> pixels) {
  const auto& m = model.model_config();
  const Shape expect{pixels.rank() == 4 ? pixels.dim(0) : -1, m.image_channels, m.image_side, m.image_side};
  if (pixels.shape() != expect)
    throw std::invalid_argument("make_batch: pixels " + shape_str(pixels.shape()) + " do not match the model");
  Batch<T> b;
  b.target = Tensor<T>(pixels.shape());
  for (std::size_t i = 0; i < pixels.size(); ++i)
    b.target[i] = static_cast<T>(m.likelihood == Likelihood::kBernoulli ? pixels[i] : 2.0 * pixels[i] / 255.0 - 1.0);
  if (const ContextCodec* codec = model.codec()) {
    const Shape item{m.image_channels, m.image_side, m.image_side};
    const std::size_t per = shape_size(item);
    Shape ys = codec->code_shape();
    ys.insert(ys.begin(), pixels.dim(0));
    b.context_y0 = Tensor<T>(ys);
    const std::size_t cper = codec->code_size();
    for (int n = 0; n < pixels.dim(0); ++n) {
      std::vector<double> v(pixels.data() + n * per, pixels.data() + (n + 1) * per);
      b.codes.push_back(encode(Tensor<double>(item, std::move(v)), *codec));
      const auto u = normalized(b.codes.back(), *codec);
      for (std::size_t j = 0; j < cper; ++j) b.context_y0[n * cper + j] = static_cast<T>(u[j]);
    }
    b.context_image = context_images(model, b.codes);
  }
  b.pixels = std::move(pixels);
  return b;
}

template <class T>
ObjectiveNoise<T> draw_objective_noise(const JointModel<T>& model, int batch, bool sampled_steps, Rng& rng) {
  ObjectiveNoise<T> n;
  n.latents = draw_noise<T>(model.model_config(), batch, rng);
  if (const ContextCodec* codec = model.codec()) {
    Shape ys = codec->code_shape();
    ys.insert(ys.begin(), batch);
    n.diffusion = draw_vlb_noise<T>(ys, model.schedule().steps, rng);
    if (sampled_steps) n.steps = sample_steps(batch, model.schedule().steps, rng);
  }
  return n;
}

template <class T>
Objective<T> joint_objective(Tape<T>& tape, const JointModel<T>& model, const Batch<T>& batch,
                             const ObjectiveNoise<T>& noise) {
  const Hvae<T>& vae = model.vae();
  const int n = batch.size();
  auto x_in = tape.constant(vae.encoder_input(batch.target));
  const auto features = vae.bottom_up(tape, x_in);
  std::optional<Var<T>> ctx;
  if (model.codec()) ctx = tape.constant(batch.context_image);
  Objective<T> obj;
  obj.hierarchy = vae.top_down(tape, &features, ctx, SampleRequest{SampleMode::kReconstruction, 0, 1.0}, noise.latents);

  auto nll = scale(vae.log_likelihood(obj.hierarchy, batch.target), T(-1));
  std::optional<Var<T>> kl;
  for (const auto& layer : obj.hierarchy.layers) {
    auto k = sum_per_item(*layer.kl);
    kl = kl ? add(*kl, k) : k;
  }
  auto per_item = add(nll, *kl);
  const auto to_vec = [](const Var<T>& v) { return std::vector<double>(v.value().values().begin(), v.value().values().end()); };
  obj.recon = to_vec(nll);
  obj.kl = to_vec(*kl);
  obj.diffusion.assign(static_cast<std::size_t>(n), 0.0);
  if (const Denoiser<T>* prior = model.prior()) {
    auto vlb = vlb_loss(tape, *prior, batch.context_y0, model.context_grid(), model.schedule(), noise.diffusion,
                        noise.steps);
    obj.diffusion = to_vec(vlb.total);
    per_item = add(per_item, vlb.total);
  }
  obj.total = to_vec(per_item);
  obj.loss = mean(per_item);
  return obj;
}

#define DCTVAE_INSTANTIATE_JOINT(T)                                                                   \
  template class JointModel<T>;                                                                       \
  template Tensor<T> context_images<T>(const JointModel<T>&, const std::vector<ContextCode>&);        \
  template Batch<T> make_batch<T>(const JointModel<T>&, Tensor<double>);                              \
  template ObjectiveNoise<T> draw_objective_noise<T>(const JointModel<T>&, int, bool, Rng&);          \
  template Objective<T> joint_objective<T>(Tape<T>&, const JointModel<T>&, const Batch<T>&, const ObjectiveNoise<T>&);

DCTVAE_INSTANTIATE_JOINT(float)
DCTVAE_INSTANTIATE_JOINT(double)

}  // namespace dctvae
