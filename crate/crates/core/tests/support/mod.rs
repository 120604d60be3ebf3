pub mod grad_oracle;
