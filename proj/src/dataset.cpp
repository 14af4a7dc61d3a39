#include "facetrack/dataset.hpp"
#include "facetrack/parallel.hpp"
#include "facetrack/rotation.hpp"

#include <cstdio>
#include <map>
#include <numbers>
#include <random>

namespace facetrack {

std::vector<TrainingSample> make_annotated_samples(const SyntheticRig& rig, const TrainingSetSpec& spec,
                                                   const CameraIntrinsics& camera) {
  require(spec.subjects >= 1 && spec.samples_per_subject >= 1, ErrorCategory::invalid_input,
          "training set needs subjects and samples");
  require(spec.distance_min > 0.0 && spec.distance_max >= spec.distance_min, ErrorCategory::invalid_input,
          "invalid distance range");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double deg = std::numbers::pi / 180.0;
  const int nexp = rig.core.dims().expressions - 1;

  struct Draw {
    std::string subject;
    VectorX w_id;
    RigidPose pose;
    VectorX expr;
  };
  std::vector<Draw> draws;
  for (int s = 0; s < spec.subjects; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "subject_%03d", s);
    const VectorX w = rig.random_identity(rng, spec.identity_spread);
    for (int k = 0; k < spec.samples_per_subject; ++k) {
      Draw d;
      d.subject = name;
      d.w_id = w;
      const Mat3 r = rotation_from_axis_angle(Vec3(0, spec.yaw_deg * deg * u(rng), 0)) *
                     rotation_from_axis_angle(Vec3(spec.pitch_deg * deg * u(rng), 0, 0)) *
                     rotation_from_axis_angle(Vec3(0, 0, spec.roll_deg * deg * u(rng)));
      d.pose.rotation = axis_angle_from_rotation(r);
      const double z = spec.distance_min + (spec.distance_max - spec.distance_min) * unit(rng);
      d.pose.translation = Vec3(spec.lateral * u(rng), spec.lateral * u(rng), z);
      d.expr = random_expression(rng, nexp, 0.35, 0.9);
      draws.push_back(std::move(d));
    }
  }
  std::vector<TrainingSample> samples(draws.size());
  const Lighting lighting;
  parallel_for(static_cast<int>(draws.size()), [&](int i) {
    const Draw& d = draws[i];
    RenderedFrame f = render_rgbd(rig, d.w_id, d.pose, d.expr, camera, lighting, nullptr, 0);
    samples[i].image = std::move(f.color);
    samples[i].landmarks = std::move(f.landmarks);
    samples[i].subject_id = d.subject;
  });
  return samples;
}

PreparedTrainingSet prepare_training_set(const std::vector<TrainingSample>& samples, const ReducedCoreTensor& tensor,
                                         const MeshTopology& topology, const CameraIntrinsics& camera,
                                         const PerturbConfig& perturb, int alternations) {
  require(!samples.empty(), ErrorCategory::invalid_input, "no training samples");
  const ReducedCoreTensor lt = landmark_tensor(tensor, topology);
  PreparedTrainingSet out;
  std::map<std::string, int> subject_index;
  std::vector<std::vector<int>> members;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto [it, inserted] = subject_index.emplace(samples[i].subject_id, static_cast<int>(members.size()));
    if (inserted) {
      members.emplace_back();
      out.subject_names.push_back(samples[i].subject_id);
    }
    members[it->second].push_back(static_cast<int>(i));
  }
  const int subjects = static_cast<int>(members.size());
  out.subject_identity.resize(subjects);
  out.data.subjects.resize(subjects);
  out.data.images.resize(samples.size());
  out.data.image_subject.resize(samples.size());
  out.truths.resize(samples.size());
  std::vector<JointIdentityResult> joint(subjects);
  for (int s = 0; s < subjects; ++s) {
    std::vector<const TrainingSample*> group;
    for (int i : members[s]) group.push_back(&samples[i]);
    joint[s] = joint_identity_refinement(group, lt, camera, alternations);
    out.subject_identity[s] = joint[s].w_id;
  }
  std::vector<BlendshapeSet> shapes(subjects);
  double rmse_sum = 0.0;
  for (int s = 0; s < subjects; ++s) {
    shapes[s] = build_blendshapes(tensor, out.subject_identity[s]);
    out.data.subjects[s] = ExpressionBasis::from(shapes[s], topology.landmark_vertices);
    for (const auto& f : joint[s].fits) rmse_sum += f.rmse;
  }
  out.mean_fit_rmse = rmse_sum / static_cast<double>(samples.size());

  const int nexp = tensor.dims().expressions - 1;
  const int nl = topology.landmark_count();
  parallel_for(static_cast<int>(samples.size()), [&](int i) {
    const int s = subject_index.at(samples[i].subject_id);
    std::size_t pos = 0;
    while (members[s][pos] != i) ++pos;
    ShapeParams init(nexp, nl);
    init.pose = joint[s].fits[pos].pose;
    const DisplacementFit fit = fit_expression_displacement(samples[i], shapes[s], topology, camera, init);
    out.truths[i].image = static_cast<std::size_t>(i);
    out.truths[i].params = fit.params;
    out.data.images[i] = to_gray(samples[i].image);
    out.data.image_subject[i] = s;
  });
  out.data.pairs = make_training_pairs(out.truths, perturb);
  return out;
}

}  // namespace facetrack
