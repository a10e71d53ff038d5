use ndarray::{Axis, IxDyn, Slice};

use crate::graph::{Array, Var};

impl<'g> Var<'g> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, x.len(), "reshape {:?} -> {:?}", x.shape(), shape);
        let out = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let original = x.shape().to_vec();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let g = g.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&original)).expect("reshape grad");
                vec![Some(g)]
            }),
        )
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(axes.len(), x.ndim(), "permute rank");
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Var<'g> {
        let n = self.ndim();
        assert!(n >= 2);
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        assert!(start + len <= x.shape()[axis], "narrow out of range");
        let out = x.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let full = x.raw_dim();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = Array::zeros(full.clone());
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
                vec![Some(dx)]
            }),
        )
    }

    /// Splits into `parts` equal chunks along `axis`.
    pub fn chunk(self, parts: usize, axis: usize) -> Vec<Var<'g>> {
        let len = self.dim(axis);
        assert_eq!(len % parts, 0, "chunk: {len} not divisible by {parts}");
        let step = len / parts;
        (0..parts).map(|i| self.narrow(axis, i * step, step)).collect()
    }

    pub fn concat(vars: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!vars.is_empty(), "concat of nothing");
        let graph = vars[0].graph;
        let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        graph.push(
            out,
            vars,
            Box::new(move |g, needs| {
                let mut offset = 0;
                lens.iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let part = need.then(|| g.slice_axis(Axis(axis), Slice::from(offset..offset + len)).to_owned());
                        offset += len;
                        part
                    })
                    .collect()
            }),
        )
    }
}
