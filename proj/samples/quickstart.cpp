// Tiny end-to-end run: data, teacher, student, certificate, OOD scores.
#include <iostream>

#include "dde/dde.hpp"

int main() {
  using namespace dde;
  GenerateConfig data;
  data.factors = default_factors();
  data.height = data.width = 16;
  data.train_per_partition = 60;
  data.calibration_per_partition = 20;
  data.test_per_combination = 20;
  data.pairs_per_factor = 300;
  FactorDataset ds = generate(data);
  std::cout << partition_summary(ds);

  TeacherConfig tc;
  tc.arch.widths = {8, 16, 32, 32, 32};
  tc.epochs = 15;
  EncoderModel teacher = train_teacher(ds, tc, 7);

  DistillConfig dc;
  dc.epochs = 10;
  dc.lr = 1e-3;
  dc.d_composite = "raw";
  auto res = distill(teacher, compress(teacher, 0.5, 8), ds, dc, 7);
  const auto& last = res.trace.epochs.back();
  std::cout << "student params " << res.student.parameter_count() << " / teacher " << teacher.parameter_count()
            << ", L_D " << last.loss_d_raw << '\n';

  CertReport rep = certify(res.student, ds, CertConstants{});
  for (const auto& b : rep.bounds) std::cout << "zeta_" << to_string(b.kind) << " " << b.zeta << '\n';

  for (const auto* m : {&teacher, &res.student})
    for (const auto& e : evaluate_model(*m, ds, OodConfig{}, 7)) std::cout << e.factor << " auroc " << e.auroc << '\n';
}
