#pragma once

#include "analysis.hpp"
#include "attention.hpp"
#include "autodiff.hpp"
#include "constructions.hpp"
#include "interleaved.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "serialize.hpp"
#include "tasks.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
#include "verify.hpp"
